"""Numba and numpy kernel implementations must agree, and both must be the
adjoint/derivative of their forward counterparts."""

import numpy as np
import pytest

from blindpatch import _kernels
from blindpatch._kernels import _numpy_impl

try:
    from blindpatch._kernels import _numba_impl

    IMPLS = [("numpy", _numpy_impl), ("numba", _numba_impl)]
except ImportError:
    IMPLS = [("numpy", _numpy_impl)]

RNG = np.random.default_rng(42)


def test_backend_reports_name():
    assert _kernels.backend() in ("numpy", "numba")


@pytest.mark.parametrize("stride", [1, 2])
def test_impls_agree(stride):
    x = RNG.normal(size=(2, 10, 10, 3))
    w = RNG.normal(size=(3, 3, 3, 5))
    b = RNG.normal(size=5)
    ref = None
    for _, impl in IMPLS:
        y = impl.conv2d(x, w, b, stride, 1)
        gy = np.ones_like(y)
        gx = impl.conv2d_grad_input(gy, w, stride, 1, 10, 10)
        gw, gb = impl.conv2d_grad_weights(x, gy, stride, 1, 3, 3)
        if ref is None:
            ref = (y, gx, gw, gb)
        else:
            for a, r in zip((y, gx, gw, gb), ref):
                np.testing.assert_allclose(a, r, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_gradients_match_finite_differences(stride, pad):
    x = RNG.normal(size=(1, 6, 6, 2))
    w = RNG.normal(size=(3, 3, 2, 3))
    b = RNG.normal(size=3)
    y = _kernels.conv2d(x, w, b, stride, pad)
    gy = RNG.normal(size=y.shape)
    gx = _kernels.conv2d_grad_input(gy, w, stride, pad, 6, 6)
    gw, gb = _kernels.conv2d_grad_weights(x, gy, stride, pad, 3, 3)

    eps = 1e-6

    def loss(xx, ww, bb):
        return float((_kernels.conv2d(xx, ww, bb, stride, pad) * gy).sum())

    for idx in [(0, 0, 0, 0), (0, 3, 4, 1), (0, 5, 5, 0)]:
        up, dn = x.copy(), x.copy()
        up[idx] += eps
        dn[idx] -= eps
        fd = (loss(up, w, b) - loss(dn, w, b)) / (2 * eps)
        assert abs(fd - gx[idx]) < 1e-6 * max(1.0, abs(fd))
    for idx in [(0, 0, 0, 0), (2, 1, 1, 2)]:
        up, dn = w.copy(), w.copy()
        up[idx] += eps
        dn[idx] -= eps
        fd = (loss(x, up, b) - loss(x, dn, b)) / (2 * eps)
        assert abs(fd - gw[idx]) < 1e-6 * max(1.0, abs(fd))
    up, dn = b.copy(), b.copy()
    up[1] += eps
    dn[1] -= eps
    fd = (loss(x, w, up) - loss(x, w, dn)) / (2 * eps)
    assert abs(fd - gb[1]) < 1e-6 * max(1.0, abs(fd))


def test_bilinear_scatter_is_gather_adjoint():
    img = RNG.normal(size=(7, 9, 3))
    ys = RNG.uniform(-1.0, 8.0, size=40)
    xs = RNG.uniform(-1.0, 10.0, size=40)
    vals = _kernels.bilinear_gather(img, ys, xs)
    g = RNG.normal(size=vals.shape)
    lhs = float((vals * g).sum())
    rhs = float((img * _kernels.bilinear_scatter(g, ys, xs, 7, 9)).sum())
    assert abs(lhs - rhs) < 1e-10


def test_bilinear_gather_exact_on_constant_images():
    img = np.full((5, 5, 3), 0.37)
    ys = RNG.uniform(0, 4, size=25)
    xs = RNG.uniform(0, 4, size=25)
    assert (_kernels.bilinear_gather(img, ys, xs) == 0.37).all()


def test_bilinear_gather_clamps_at_edges():
    img = np.arange(12, dtype=np.float64).reshape(2, 2, 3)
    far = _kernels.bilinear_gather(img, np.array([-5.0, 99.0]), np.array([-5.0, 99.0]))
    np.testing.assert_array_equal(far[0], img[0, 0])
    np.testing.assert_array_equal(far[1], img[1, 1])


def test_bilinear_interpolates_linearly():
    img = np.zeros((2, 2, 1))
    img[0, 1, 0] = 1.0
    out = _kernels.bilinear_gather(img, np.array([0.0]), np.array([0.25]))
    assert out[0, 0] == pytest.approx(0.25, abs=1e-15)
