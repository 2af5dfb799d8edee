"""Hot numeric kernels: 2-D convolution and bilinear sampling, forward and backward.

Two interchangeable implementations live side by side:

* ``_numba_impl`` -- ``@njit``-compiled loops, the default when numba imports.
* ``_numpy_impl`` -- vectorized pure numpy, always available.

Selection is driven by the ``BLINDPATCH_BACKEND`` environment variable
(``auto`` | ``numba`` | ``numpy``, default ``auto``). ``benchmarks/bench_kernels.py``
times one against the other.

All kernels take and return C-contiguous float64 arrays.
"""

from __future__ import annotations

import os

import numpy as np

from . import _numpy_impl

_CHOICE = os.environ.get("BLINDPATCH_BACKEND", "auto").lower()
if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"BLINDPATCH_BACKEND must be 'auto', 'numba' or 'numpy', got {_CHOICE!r}"
    )

if _CHOICE == "numpy":
    _impl = _numpy_impl
else:
    try:
        from . import _numba_impl as _impl  # type: ignore[no-redef]
    except ImportError:
        if _CHOICE == "numba":
            raise
        _impl = _numpy_impl


def backend() -> str:
    """Name of the kernel implementation in use ('numba' or 'numpy')."""
    return "numpy" if _impl is _numpy_impl else "numba"


def _f64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlate NHWC input with KHxKWxCinxCout weights, zero padding."""
    return _impl.conv2d(_f64(x), _f64(w), _f64(b), stride, pad)


def conv2d_grad_input(
    gy: np.ndarray, w: np.ndarray, stride: int, pad: int, h: int, wd: int
) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input, given the output gradient."""
    return _impl.conv2d_grad_input(_f64(gy), _f64(w), stride, pad, h, wd)


def conv2d_grad_weights(
    x: np.ndarray, gy: np.ndarray, stride: int, pad: int, kh: int, kw: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. weights and bias."""
    return _impl.conv2d_grad_weights(_f64(x), _f64(gy), stride, pad, kh, kw)


def bilinear_gather(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample an HxWxC image at float (y, x) coords with edge-clamped bilinear."""
    return _impl.bilinear_gather(_f64(img), _f64(ys), _f64(xs))


def bilinear_scatter(
    gvals: np.ndarray, ys: np.ndarray, xs: np.ndarray, h: int, wd: int
) -> np.ndarray:
    """Transpose of bilinear_gather: scatter sample gradients back onto the grid."""
    return _impl.bilinear_scatter(_f64(gvals), _f64(ys), _f64(xs), h, wd)
