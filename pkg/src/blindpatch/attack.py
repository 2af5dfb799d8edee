"""Attack losses (detection confidence + total variation), the five base
update rules, and the plateau learning-rate criterion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AdversarialPatch, DetectionSet

ATTACK_METHODS = ("adam", "sgd", "bim", "pgd", "mim")
CONF_REDUCTIONS = ("mean_all", "max_per_image")
CONF_SOURCES = ("objectness", "obj_times_class")

_TV_EPS = 1e-12


@dataclass
class LossResult:
    """Scalar detection loss plus optional gradients w.r.t. raw confidences."""

    value: float
    no_signal: bool
    n_candidates: int
    d_obj: np.ndarray | None = None
    d_cls: np.ndarray | None = None


def _loss_from_conf(conf_per_image: list[np.ndarray], reduction: str) -> tuple[float, list[np.ndarray]]:
    """Reduce per-image confidence vectors; returns (value, d_conf per image)."""
    grads = [np.zeros_like(c) for c in conf_per_image]
    if reduction == "mean_all":
        total = sum(c.size for c in conf_per_image)
        if total == 0:
            return 0.0, grads
        value = sum(float(c.sum()) for c in conf_per_image) / total
        for g in grads:
            g[:] = 1.0 / total
        return value, grads
    if reduction == "max_per_image":
        present = [i for i, c in enumerate(conf_per_image) if c.size > 0]
        if not present:
            return 0.0, grads
        value = 0.0
        for i in present:
            c = conf_per_image[i]
            k = int(np.argmax(c))
            value += float(c[k])
            grads[i][k] = 1.0 / len(present)
        return value / len(present), grads
    raise ValueError(f"unknown reduction {reduction!r}, expected one of {CONF_REDUCTIONS}")


def detection_loss(
    raw,
    target_class: int,
    reduction: str = "mean_all",
    conf_source: str = "objectness",
) -> LossResult:
    """Mean attack confidence of the target class over a raw-stage batch.

    ``raw`` is either a detector raw prediction (gradients populated) or a
    plain list of raw DetectionSets (value only). Confidences are nonnegative,
    so this equals the l1 distance from zero confidence.
    """
    if conf_source not in CONF_SOURCES:
        raise ValueError(f"unknown conf_source {conf_source!r}, expected one of {CONF_SOURCES}")

    if isinstance(raw, list) and all(isinstance(d, DetectionSet) for d in raw):
        conf = []
        for dset in raw:
            if conf_source == "objectness":
                vals = [d.objectness for d in dset if d.class_id == target_class]
            else:
                vals = [
                    d.objectness * d.class_score for d in dset if d.class_id == target_class
                ]
            conf.append(np.asarray(vals, dtype=np.float64))
        value, _ = _loss_from_conf(conf, reduction)
        n = sum(c.size for c in conf)
        return LossResult(value=value, no_signal=n == 0, n_candidates=n)

    # raw prediction with (B, N) objectness and (B, N, K) class probabilities
    obj = np.asarray(raw.objectness, dtype=np.float64)
    cls = np.asarray(raw.class_probs, dtype=np.float64)
    bsz, n = obj.shape
    if conf_source == "objectness":
        sel = cls.argmax(axis=2) == target_class
        conf = [obj[b][sel[b]] for b in range(bsz)]
        value, grads = _loss_from_conf(conf, reduction)
        d_obj = np.zeros_like(obj)
        for b in range(bsz):
            d_obj[b][sel[b]] = grads[b]
        d_cls = np.zeros_like(cls)
        total = int(sel.sum())
    else:
        p_t = cls[:, :, target_class]
        conf = [(obj[b] * p_t[b]) for b in range(bsz)]
        value, grads = _loss_from_conf(conf, reduction)
        d_obj = np.zeros_like(obj)
        d_cls = np.zeros_like(cls)
        for b in range(bsz):
            d_obj[b] = grads[b] * p_t[b]
            d_cls[b, :, target_class] = grads[b] * obj[b]
        total = obj.size
    return LossResult(
        value=value, no_signal=total == 0, n_candidates=total, d_obj=d_obj, d_cls=d_cls
    )


def _tv_terms(px: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dh = np.zeros_like(px)
    dv = np.zeros_like(px)
    dh[:, :-1] = px[:, 1:] - px[:, :-1]
    dv[:-1, :] = px[1:, :] - px[:-1, :]
    terms = np.sqrt(dh * dh + dv * dv + _TV_EPS)
    return terms, dh, dv


def tv_loss(patch: AdversarialPatch | np.ndarray) -> float:
    """Anisotropic total variation: mean over pixels and channels of
    sqrt(dh^2 + dv^2 + eps) with forward differences (zero at the far edges)."""
    px = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64)
    terms, _, _ = _tv_terms(px)
    return float(terms.mean())


def tv_loss_grad(patch: AdversarialPatch | np.ndarray) -> tuple[float, np.ndarray]:
    """Total variation value together with its gradient w.r.t. the pixels."""
    px = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64)
    terms, dh, dv = _tv_terms(px)
    scale = 1.0 / terms.size
    rh = dh / terms
    rv = dv / terms
    grad = -(rh + rv)
    grad[:, 1:] += rh[:, :-1]
    grad[1:, :] += rv[:-1, :]
    return float(terms.mean()), grad * scale


def total_loss(det_loss: float, tv: float, tv_weight: float) -> float:
    if tv_weight < 0.0:
        raise ValueError("tv_weight must be >= 0")
    return det_loss + tv_weight * tv


@dataclass
class AttackState:
    """Method tag, learning rate, and method-private buffers for one run."""

    method: str
    lr: float
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step_count: int = 0
    skipped_nonfinite: int = 0
    sgd_momentum: float = 0.9
    mim_decay: float = 1.0
    pgd_init: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


def init_attack_state(
    method: str,
    lr: float,
    patch_shape: tuple[int, ...],
    sgd_momentum: float = 0.9,
    mim_decay: float = 1.0,
    pgd_init: float = 0.1,
) -> AttackState:
    if method not in ATTACK_METHODS:
        raise ValueError(f"unknown attack method {method!r}, expected one of {ATTACK_METHODS}")
    if lr <= 0.0:
        raise ValueError("learning rate must be > 0")
    state = AttackState(
        method=method,
        lr=lr,
        sgd_momentum=sgd_momentum,
        mim_decay=mim_decay,
        pgd_init=pgd_init,
    )
    if method in ("adam", "sgd", "mim"):
        state.m = np.zeros(patch_shape)
    if method == "adam":
        state.v = np.zeros(patch_shape)
    return state


def attack_step(
    patch: np.ndarray,
    grad: np.ndarray,
    state: AttackState,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One minimization update of the patch; always returns pixels in [0,1].

    Non-finite gradients skip the update (counted on the state). The pgd
    method perturbs the patch uniformly at step 0 and projects onto [0,1].
    """
    patch = np.asarray(patch, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != patch.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match patch {patch.shape}")
    if not np.isfinite(grad).all():
        state.skipped_nonfinite += 1
        return np.clip(patch, 0.0, 1.0)

    lr = state.lr
    if state.method == "pgd" and state.step_count == 0:
        if rng is None:
            raise ValueError("pgd needs an rng for its random initialization")
        patch = patch + rng.uniform(-state.pgd_init, state.pgd_init, size=patch.shape)
        patch = np.clip(patch, 0.0, 1.0)

    if state.method == "adam":
        state.step_count += 1
        t = state.step_count
        state.m = state.adam_beta1 * state.m + (1.0 - state.adam_beta1) * grad
        state.v = state.adam_beta2 * state.v + (1.0 - state.adam_beta2) * grad * grad
        m_hat = state.m / (1.0 - state.adam_beta1**t)
        v_hat = state.v / (1.0 - state.adam_beta2**t)
        patch = patch - lr * m_hat / (np.sqrt(v_hat) + state.adam_eps)
    elif state.method == "sgd":
        state.step_count += 1
        state.m = state.sgd_momentum * state.m + grad
        patch = patch - lr * state.m
    elif state.method == "bim" or state.method == "pgd":
        state.step_count += 1
        patch = patch - lr * np.sign(grad)
    elif state.method == "mim":
        state.step_count += 1
        l1 = float(np.abs(grad).sum())
        state.m = state.mim_decay * state.m + (grad / l1 if l1 > 0.0 else 0.0)
        patch = patch - lr * np.sign(state.m)
    else:
        raise ValueError(f"unknown attack method {state.method!r}")

    return np.clip(patch, 0.0, 1.0)


@dataclass
class SchedulerState:
    """Plateau criterion state: decay when the epoch loss stops moving."""

    lr: float
    decay: float = 0.5
    eps_abs: float = 1e-4
    eps_rel: float = 1e-4
    floor: float = 1e-6
    prev_loss: float | None = None
    literal: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.decay < 1.0):
            raise ValueError("decay factor must lie in (0, 1)")
        if self.lr <= 0.0:
            raise ValueError("learning rate must be > 0")


# strict thresholds carry a one-part-in-1e9 guard: losses specified as
# decimals quantize to binary a few ulps off, and a change sitting exactly
# on the threshold must not count as "strictly below" it
_GUARD = 1.0 - 1e-9


def scheduler_update(state: SchedulerState, loss: float) -> SchedulerState:
    """Decay the rate when |loss_t - loss_{t-1}| is small both absolutely and
    relative to loss_t; a zero loss counts as a plateau.

    The literal flag restores the signed-difference criterion, which also
    fires on large improvements.
    """
    loss = float(loss)
    if not np.isfinite(loss):
        raise ValueError("epoch loss must be finite")
    if state.prev_loss is not None:
        delta = loss - state.prev_loss
        if state.literal:
            trigger = (loss == 0.0) or (
                delta < state.eps_abs * _GUARD and delta < state.eps_rel * _GUARD * loss
            )
        else:
            trigger = (loss == 0.0) or (
                abs(delta) < state.eps_abs * _GUARD
                and abs(delta) < state.eps_rel * _GUARD * loss
            )
        if trigger:
            state.lr = max(state.lr * state.decay, state.floor)
    state.prev_loss = loss
    return state
