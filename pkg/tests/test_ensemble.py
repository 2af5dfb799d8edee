"""Constrained augmentation, stochastic residual scaling, and patch cutout."""

import numpy as np
import pytest

from blindpatch.ensemble import (
    AugmentationPolicy,
    ShakeDropSample,
    augment,
    cutout,
    maybe_cutout,
    sample_shakedrop,
    shakedrop_backward,
    shakedrop_forward,
)


class TestAugment:
    def test_identity_policy_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, size=(16, 16, 3))
        out = augment(img, AugmentationPolicy.identity(), rng)
        np.testing.assert_array_equal(out, img)

    def test_flip_only_is_exact_mirror(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, size=(8, 10, 3))
        policy = AugmentationPolicy(
            flip_prob=1.0, crop_scale=(1.0, 1.0), brightness=0.0,
            contrast=0.0, saturation=0.0, hue=0.0, rotation_deg=0.0,
        )
        out = augment(img, policy, rng)
        np.testing.assert_array_equal(out, img[:, ::-1, :])

    def test_default_policy_keeps_shape_and_range(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, size=(24, 24, 3))
        policy = AugmentationPolicy()
        for _ in range(200):
            out = augment(img, policy, rng)
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_color_change_within_derived_bound(self):
        # geometry off: per-pixel change is bounded by the sum of the color
        # magnitudes (each op moves a pixel by at most its magnitude, values
        # being <= 1) plus the hue rotation arc |theta| * |(I,Q)| <= 2*pi*hue.
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, size=(16, 16, 3))
        policy = AugmentationPolicy(
            flip_prob=0.0, crop_scale=(1.0, 1.0), brightness=0.2,
            contrast=0.2, saturation=0.2, hue=0.1, rotation_deg=0.0,
        )
        bound = 0.2 + 0.2 + 0.2 + 2 * np.pi * 0.1
        changes = []
        for _ in range(1000):
            out = augment(img, policy, rng)
            changes.append(np.abs(out - img).mean())
            assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.mean(changes) <= bound

    def test_unconstrained_policies_rejected(self):
        with pytest.raises(ValueError):
            AugmentationPolicy(crop_scale=(0.5, 1.0))
        with pytest.raises(ValueError):
            AugmentationPolicy(rotation_deg=45.0)
        with pytest.raises(ValueError):
            AugmentationPolicy(brightness=0.5)


class TestShakeDrop:
    def test_keep_branch_is_bit_identical(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(4, 5))
        f = rng.normal(size=(4, 5))
        for alpha in (0.0, 0.37, 1.9):
            s = ShakeDropSample(beta=1, alpha=alpha, prob=0.5)
            np.testing.assert_array_equal(shakedrop_forward(z, f, s), z + f)

    def test_dropped_branch_scales_by_alpha(self):
        z = np.array([1.0, 2.0])
        f = np.array([0.5, -0.5])
        s0 = ShakeDropSample(beta=0, alpha=0.0, prob=0.5)
        np.testing.assert_array_equal(shakedrop_forward(z, f, s0), z)
        s2 = ShakeDropSample(beta=0, alpha=2.0, prob=0.5)
        np.testing.assert_array_equal(shakedrop_forward(z, f, s2), z + 2.0 * f)

    def test_shape_mismatch_raises(self):
        s = ShakeDropSample(beta=1, alpha=1.0, prob=0.5)
        with pytest.raises(ValueError):
            shakedrop_forward(np.zeros(3), np.zeros(4), s)

    def test_backward_requires_forward(self):
        s = ShakeDropSample(beta=0, alpha=1.0, prob=0.5, gamma=1)
        with pytest.raises(RuntimeError):
            shakedrop_backward(np.ones(2), s, 0.5)

    def test_backward_factors(self):
        z = np.ones(3)
        f = np.ones(3)
        up = np.array([1.0, 2.0, 3.0])
        df = 0.25
        s = ShakeDropSample(beta=0, alpha=0.7, prob=0.5, gamma=1)
        shakedrop_forward(z, f, s)
        np.testing.assert_allclose(shakedrop_backward(up, s, df), up * (1 + df))
        s = ShakeDropSample(beta=0, alpha=0.0, prob=0.5, gamma=0)
        shakedrop_forward(z, f, s)
        np.testing.assert_array_equal(shakedrop_backward(up, s, df), up)

    def test_backward_matches_finite_differences_on_linear_block(self):
        # scalar block F(z) = w*z with frozen (gamma, alpha): the propagated
        # gradient must equal the derivative of E(z + factor*w*z)
        w = 0.8
        gamma, alpha = 0, 1.3
        factor = alpha if gamma == 0 else 1.0

        def energy(z):
            z_out = z + factor * (w * z)
            return 0.5 * z_out**2

        z0 = 0.37
        s = ShakeDropSample(beta=0, alpha=alpha, prob=0.5, gamma=gamma)
        shakedrop_forward(np.array([z0]), np.array([w * z0]), s)
        upstream = z0 * (1 + factor * w)  # dE/dz_out at z0
        grad = shakedrop_backward(np.array([upstream]), s, w)
        eps = 1e-7
        fd = (energy(z0 + eps) - energy(z0 - eps)) / (2 * eps)
        assert abs(grad[0] - fd) / abs(fd) < 1e-6

    def test_gamma_drawn_lazily_at_backward(self):
        rng = np.random.default_rng(0)
        s = sample_shakedrop(rng, prob=0.5, spread=1.0)
        assert s.gamma is None
        shakedrop_forward(np.ones(2), np.ones(2), s)
        shakedrop_backward(np.ones(2), s, 0.1, rng=rng)
        assert s.gamma in (0, 1)

    def test_forward_factor_mean_is_one(self):
        rng = np.random.default_rng(123)
        n = 100_000
        factors = np.empty(n)
        for i in range(n):
            s = sample_shakedrop(rng, prob=0.5, spread=1.0)
            factors[i] = s.forward_factor()
            assert s.beta in (0, 1)
            assert 0.0 <= s.alpha <= 2.0
        assert abs(factors.mean() - 1.0) <= 0.02


class TestCutout:
    def test_zero_ratio_is_identity(self):
        rng = np.random.default_rng(0)
        px = rng.uniform(0, 1, size=(10, 10, 3))
        view, mask = cutout(px, (5, 5), ratio=0.0, fill=0.5)
        np.testing.assert_array_equal(view, px)
        assert mask.sum() == 0

    def test_interior_center_geometry(self):
        px = np.zeros((300, 300, 3))
        view, mask = cutout(px, (150, 150), ratio=0.4, fill=0.5)
        assert mask.sum() == 120 * 120
        assert (view[mask == 1.0] == 0.5).all()
        assert (view[mask == 0.0] == 0.0).all()

    def test_corner_center_clips(self):
        px = np.zeros((300, 300, 3))
        _, mask = cutout(px, (0, 0), ratio=0.4, fill=0.5)
        assert mask.sum() == 60 * 60
        assert mask[:60, :60].all()

    def test_out_of_bounds_center_rejected(self):
        with pytest.raises(ValueError):
            cutout(np.zeros((4, 4, 3)), (4, 0), 0.5, 0.5)

    def test_never_writes_outside_and_preserves_unmasked(self):
        rng = np.random.default_rng(1)
        px = rng.uniform(0, 1, size=(17, 23, 3))
        for _ in range(50):
            p = (int(rng.integers(0, 23)), int(rng.integers(0, 17)))
            ratio = float(rng.uniform(0, 1))
            view, mask = cutout(px, p, ratio, 0.3)
            outside = mask == 0.0
            np.testing.assert_array_equal(view[outside], px[outside])

    def test_maybe_cutout_probabilities(self):
        rng = np.random.default_rng(2)
        px = np.zeros((20, 20, 3))
        for _ in range(20):
            _, mask = maybe_cutout(px, 0.0, 0.4, 0.5, rng)
            assert mask is None
        locations = set()
        for _ in range(20):
            view, mask = maybe_cutout(px, 1.0, 0.4, 0.5, rng)
            assert mask is not None and mask.sum() > 0
            locations.add(mask.tobytes())
        assert len(locations) > 1

    def test_maybe_cutout_rate_concentrates(self):
        rng = np.random.default_rng(3)
        px = np.zeros((4, 4, 3))
        hits = sum(
            maybe_cutout(px, 0.9, 0.5, 0.5, rng)[1] is not None for _ in range(10_000)
        )
        assert abs(hits / 10_000 - 0.9) <= 0.01
