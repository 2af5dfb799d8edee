"""Losses, update rules, and the plateau criterion."""

import numpy as np
import pytest

from blindpatch.attack import (
    SchedulerState,
    attack_step,
    detection_loss,
    init_attack_state,
    scheduler_update,
    total_loss,
    tv_loss,
    tv_loss_grad,
)
from blindpatch.core import BoundingBox, Detection, DetectionSet

BOX = BoundingBox(0.2, 0.2, 0.4, 0.4)


def _dset(confs, image_index=0, class_id=0):
    dets = [
        Detection(BOX, objectness=c, class_id=class_id, class_score=0.9) for c in confs
    ]
    return DetectionSet(dets, image_index=image_index, raw_candidates=True)


class TestDetectionLoss:
    def test_mean_all(self):
        res = detection_loss([_dset([0.8, 0.6, 0.4])], target_class=0)
        assert res.value == pytest.approx(0.6, rel=1e-12)
        assert not res.no_signal

    def test_max_per_image(self):
        sets = [_dset([0.9, 0.1], 0), _dset([0.5], 1)]
        res = detection_loss(sets, 0, reduction="max_per_image")
        assert res.value == pytest.approx(0.7, rel=1e-12)

    def test_empty_sets_no_signal_flag(self):
        res = detection_loss([_dset([])], 0)
        assert res.value == 0.0 and res.no_signal

    def test_other_classes_ignored(self):
        res = detection_loss([_dset([0.9], class_id=1)], target_class=0)
        assert res.no_signal

    def test_mean_all_permutation_invariant(self):
        rng = np.random.default_rng(0)
        confs = list(rng.uniform(0, 1, size=7))
        a = detection_loss([_dset(confs)], 0).value
        b = detection_loss([_dset(confs[::-1])], 0).value
        assert a == pytest.approx(b, rel=1e-12)

    def test_raw_prediction_gradients(self):
        from blindpatch.detector.base import RawPrediction

        obj = np.array([[0.8, 0.6, 0.4]])
        cls = np.zeros((1, 3, 2))
        cls[..., 0] = 0.9
        cls[..., 1] = 0.1
        raw = RawPrediction(boxes=np.zeros((1, 3, 4)), objectness=obj, class_probs=cls)
        res = detection_loss(raw, 0)
        assert res.value == pytest.approx(0.6, rel=1e-12)
        np.testing.assert_allclose(res.d_obj, np.full((1, 3), 1 / 3))
        res_p = detection_loss(raw, 0, conf_source="obj_times_class")
        assert res_p.value == pytest.approx(0.6 * 0.9, rel=1e-12)
        np.testing.assert_allclose(res_p.d_obj, 0.9 / 3)
        np.testing.assert_allclose(res_p.d_cls[..., 0], obj / 3)


class TestTvLoss:
    def test_constant_patch_near_zero(self):
        assert tv_loss(np.full((5, 7, 3), 0.42)) <= 1.1e-6

    def test_two_by_two_hand_value(self):
        px = np.zeros((2, 2, 3))
        px[:, 1, :] = 1.0  # [[0,1],[0,1]] per channel
        eps = 1e-12
        expected = (2 * np.sqrt(1.0 + eps) + 2 * np.sqrt(eps)) / 4.0
        assert tv_loss(px) == pytest.approx(expected, rel=1e-12)

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(0)
        px = rng.uniform(0, 1, size=(9, 9, 3))
        assert tv_loss(0.5 * px) == pytest.approx(0.5 * tv_loss(px), rel=1e-5)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert tv_loss(rng.uniform(0, 1, size=(4, 6, 3))) >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        px = rng.uniform(0.1, 0.9, size=(5, 5, 3))
        val, grad = tv_loss_grad(px)
        assert val == pytest.approx(tv_loss(px), rel=1e-15)
        eps = 1e-7
        for idx in [(0, 0, 0), (2, 3, 1), (4, 4, 2), (1, 0, 2)]:
            up, dn = px.copy(), px.copy()
            up[idx] += eps
            dn[idx] -= eps
            fd = (tv_loss(up) - tv_loss(dn)) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestTotalLoss:
    def test_examples(self):
        assert total_loss(0.6, 0.2, 0.0) == 0.6
        assert total_loss(0.6, 0.2, 2.5) == pytest.approx(1.1, rel=1e-12)
        assert total_loss(0.0, 0.0, 99.0) == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, -0.1)


class TestAttackStep:
    def test_zero_gradient_sgd_fixed_point(self):
        patch = np.random.default_rng(0).uniform(0, 1, size=(4, 4, 3))
        state = init_attack_state("sgd", 0.1, patch.shape)
        out = attack_step(patch, np.zeros_like(patch), state)
        np.testing.assert_array_equal(out, patch)

    def test_bim_clamps_to_unit_interval(self):
        patch = np.full((1, 1, 3), 0.999)
        state = init_attack_state("bim", 0.01, patch.shape)
        out = attack_step(patch, -np.ones_like(patch), state)
        assert (out == 1.0).all()

    def test_mim_matches_bruteforce_recurrence(self):
        rng = np.random.default_rng(3)
        patch = rng.uniform(0.3, 0.7, size=(3, 3, 3))
        grad = rng.normal(size=patch.shape)
        lr = 0.01
        state = init_attack_state("mim", lr, patch.shape, mim_decay=1.0)

        # independent recurrence: g_t = g_{t-1} + g/||g||_1, tau -= lr*sign(g_t)
        ref = patch.copy()
        buf = np.zeros_like(patch)
        out = patch.copy()
        for t in range(1, 4):
            out = attack_step(out, grad, state)
            buf = buf + grad / np.abs(grad).sum()
            ref = np.clip(ref - lr * np.sign(buf), 0.0, 1.0)
            np.testing.assert_array_equal(out, ref)
            np.testing.assert_allclose(
                np.abs(state.m).sum(), t * np.abs(grad / np.abs(grad).sum()).sum(), rtol=1e-12
            )

    def test_adam_single_step_hand_computed(self):
        patch = np.full((1, 1, 3), 0.5)
        grad = np.array([[[0.2, -0.1, 0.05]]])
        state = init_attack_state("adam", 0.01, patch.shape)
        out = attack_step(patch, grad, state)
        m_hat = grad  # (1-b1)*g / (1-b1)
        v_hat = grad * grad
        expected = np.clip(patch - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), 0, 1)
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_pgd_random_init_then_projection(self):
        rng = np.random.default_rng(4)
        patch = np.full((2, 2, 3), 0.5)
        state = init_attack_state("pgd", 0.01, patch.shape, pgd_init=0.1)
        grad = np.ones_like(patch)
        out = attack_step(patch, grad, state, rng=rng)
        assert not np.array_equal(out, np.clip(patch - 0.01, 0, 1))  # init noise applied
        assert out.min() >= 0.0 and out.max() <= 1.0
        # second step has no re-initialization: pure sign update
        out2 = attack_step(out, grad, state, rng=rng)
        np.testing.assert_allclose(out2, np.clip(out - 0.01, 0, 1), rtol=0, atol=1e-15)

    def test_pgd_requires_rng(self):
        state = init_attack_state("pgd", 0.01, (1, 1, 3))
        with pytest.raises(ValueError):
            attack_step(np.full((1, 1, 3), 0.5), np.ones((1, 1, 3)), state)

    def test_nonfinite_gradient_skipped_and_counted(self):
        patch = np.full((1, 1, 3), 0.5)
        state = init_attack_state("adam", 0.01, patch.shape)
        grad = np.full_like(patch, np.nan)
        out = attack_step(patch, grad, state)
        np.testing.assert_array_equal(out, patch)
        assert state.skipped_nonfinite == 1 and state.step_count == 0

    def test_shape_mismatch_rejected(self):
        state = init_attack_state("sgd", 0.01, (2, 2, 3))
        with pytest.raises(ValueError):
            attack_step(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)), state)

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            init_attack_state("fgsm", 0.01, (1, 1, 3))

    @pytest.mark.parametrize("method", ["adam", "sgd", "bim", "pgd", "mim"])
    def test_result_always_in_unit_box(self, method):
        rng = np.random.default_rng(5)
        patch = rng.uniform(0, 1, size=(4, 4, 3))
        state = init_attack_state(method, 0.5, patch.shape)
        for _ in range(10):
            patch = attack_step(patch, rng.normal(size=patch.shape), state, rng=rng)
            assert patch.min() >= 0.0 and patch.max() <= 1.0


class TestScheduler:
    def test_exact_plateau_decays(self):
        s = SchedulerState(lr=0.1, decay=0.5, eps_abs=1e-4, eps_rel=1e-4)
        scheduler_update(s, 1.0)
        assert s.lr == 0.1  # first epoch: no previous loss
        scheduler_update(s, 1.0)
        assert s.lr == 0.05

    def test_improvement_does_not_decay(self):
        s = SchedulerState(lr=0.1, decay=0.5, eps_abs=1e-4, eps_rel=1e-4)
        scheduler_update(s, 1.0)
        scheduler_update(s, 0.7)
        assert s.lr == 0.1

    def test_boundary_case_no_decay(self):
        s = SchedulerState(lr=0.1, decay=0.5, eps_abs=1e-4, eps_rel=1e-4)
        scheduler_update(s, 0.50005)
        scheduler_update(s, 0.5)
        assert s.lr == 0.1  # relative change exactly at eps2, not below

    def test_literal_mode_decays_on_improvement(self):
        s = SchedulerState(lr=0.1, decay=0.5, eps_abs=1e-4, eps_rel=1e-4, literal=True)
        scheduler_update(s, 1.0)
        scheduler_update(s, 0.7)  # big drop satisfies the literal inequality
        assert s.lr == 0.05

    def test_zero_loss_counts_as_plateau(self):
        s = SchedulerState(lr=0.1, decay=0.5, eps_abs=1e-4, eps_rel=1e-4)
        scheduler_update(s, 0.4)
        scheduler_update(s, 0.0)
        assert s.lr == 0.05

    def test_never_increases_and_respects_floor(self):
        rng = np.random.default_rng(6)
        s = SchedulerState(lr=0.1, decay=0.5, eps_abs=0.5, eps_rel=0.9, floor=1e-4)
        prev = s.lr
        for _ in range(100):
            scheduler_update(s, float(rng.uniform(0, 0.2)))
            assert s.lr <= prev
            assert s.lr >= 1e-4
            prev = s.lr
        assert s.lr == 1e-4  # loose thresholds decay every epoch down to the floor

    def test_bad_decay_rejected(self):
        with pytest.raises(ValueError):
            SchedulerState(lr=0.1, decay=1.5)
