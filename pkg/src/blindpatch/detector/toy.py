"""A small grid detector with hand-written forward and backward passes.

The network is a four-conv stem followed by two identity-skip residual blocks
and a 1x1 prediction head: each of the G x G cells predicts one box (center
offsets through a sigmoid, log-scale width/height around a fixed anchor),
an objectness logit, and class logits. Backprop is written out explicitly,
which is what lets the residual branches use different scale factors in the
forward and backward passes, and lets gradients flow to the input pixels.

Everything runs in float64 on the shared conv kernels.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from .. import _kernels
from ..core import BoundingBox
from ..ensemble import ShakeDropSample, sample_shakedrop
from .base import DetectorAdapter, RawPrediction

if TYPE_CHECKING:
    from ..ensemble import AugmentationPolicy

_PARAM_NAMES = (
    "w0", "b0", "w1", "b1", "w2", "b2", "w3", "b3",
    "r1aw", "r1ab", "r1bw", "r1bb",
    "r2aw", "r2ab", "r2bw", "r2bb",
    "hw", "hb",
)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smooth relu-like activation; returns (value, derivative)."""
    s = _sigmoid(x)
    return x * s, s * (1.0 + x * (1.0 - s))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ToyDetector(DetectorAdapter):
    """Desk-scale stand-in for a real one-stage detector."""

    def __init__(
        self,
        input_size: int = 64,
        width: int = 16,
        n_classes: int = 2,
        anchor: float = 0.4,
        seed: int = 0,
        name: str = "toy",
    ) -> None:
        if input_size % 8 != 0:
            raise ValueError("input_size must be divisible by 8")
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.name = name
        self.input_size = input_size
        self.width = width
        self.n_classes = n_classes
        self.anchor = float(anchor)
        self.grid = input_size // 8
        self.class_names = tuple(f"class{i}" for i in range(n_classes))
        self.params = self._init_params(np.random.default_rng(seed))
        self._shakedrop_enabled = False
        self._shakedrop_prob = 0.5
        self._shakedrop_spread = 1.0
        self._shakedrop_rng: np.random.Generator = np.random.default_rng(seed + 1)

    @property
    def residual_blocks(self) -> tuple[str, ...]:
        return ("res1", "res2")

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.width
        k = self.n_classes

        def conv_w(kh, kw, cin, cout):
            std = np.sqrt(2.0 / (kh * kw * cin))
            return rng.normal(0.0, std, size=(kh, kw, cin, cout))

        p = {
            "w0": conv_w(3, 3, 3, c), "b0": np.zeros(c),
            "w1": conv_w(3, 3, c, c), "b1": np.zeros(c),
            "w2": conv_w(3, 3, c, c), "b2": np.zeros(c),
            "w3": conv_w(3, 3, c, c), "b3": np.zeros(c),
            "r1aw": conv_w(3, 3, c, c), "r1ab": np.zeros(c),
            "r1bw": conv_w(3, 3, c, c), "r1bb": np.zeros(c),
            "r2aw": conv_w(3, 3, c, c), "r2ab": np.zeros(c),
            "r2bw": conv_w(3, 3, c, c), "r2bb": np.zeros(c),
            "hw": conv_w(1, 1, c, 5 + k), "hb": np.zeros(5 + k),
        }
        p["hb"][4] = -2.0  # start with low objectness everywhere
        return p

    # -- forward ---------------------------------------------------------

    def _features(self, x: np.ndarray, samples: list[ShakeDropSample] | None):
        p = self.params
        cache: dict[str, np.ndarray | list | None] = {"x": x, "samples": samples}

        h0 = _kernels.conv2d(x, p["w0"], p["b0"], 1, 1)
        a0, d0 = _silu(h0)
        h1 = _kernels.conv2d(a0, p["w1"], p["b1"], 2, 1)
        a1, d1 = _silu(h1)
        h2 = _kernels.conv2d(a1, p["w2"], p["b2"], 2, 1)
        a2, d2 = _silu(h2)
        h3 = _kernels.conv2d(a2, p["w3"], p["b3"], 2, 1)
        z1, d3 = _silu(h3)
        cache.update(a0=a0, d0=d0, a1=a1, d1=d1, a2=a2, d2=d2, d3=d3)

        def res_block(z, tag, sample):
            ha = _kernels.conv2d(z, p[f"{tag}aw"], p[f"{tag}ab"], 1, 1)
            sa, da = _silu(ha)
            branch = _kernels.conv2d(sa, p[f"{tag}bw"], p[f"{tag}bb"], 1, 1)
            if sample is None:
                out = z + branch
            else:
                out = z + sample.forward_factor() * branch
                sample._forwarded = True
            cache[f"{tag}_in"] = z
            cache[f"{tag}_sa"] = sa
            cache[f"{tag}_da"] = da
            return out

        z2 = res_block(z1, "r1", samples[0] if samples else None)
        z3 = res_block(z2, "r2", samples[1] if samples else None)
        head = _kernels.conv2d(z3, p["hw"], p["hb"], 1, 0)
        cache["z3"] = z3
        return head, cache

    def _decode(self, head: np.ndarray):
        g = self.grid
        k = self.n_classes
        tx = head[..., 0]
        ty = head[..., 1]
        tw = np.clip(head[..., 2], -6.0, 6.0)
        th = np.clip(head[..., 3], -6.0, 6.0)
        obj = _sigmoid(head[..., 4])
        cls = _softmax(head[..., 5:])

        cols = np.arange(g)[None, :]
        rows = np.arange(g)[:, None]
        cx = (cols + _sigmoid(tx)) / g
        cy = (rows + _sigmoid(ty)) / g
        bw = self.anchor * np.exp(tw)
        bh = self.anchor * np.exp(th)
        x1 = np.clip(cx - bw / 2.0, 0.0, 1.0)
        y1 = np.clip(cy - bh / 2.0, 0.0, 1.0)
        x2 = np.clip(cx + bw / 2.0, 0.0, 1.0)
        y2 = np.clip(cy + bh / 2.0, 0.0, 1.0)

        b = head.shape[0]
        boxes = np.stack([x1, y1, x2, y2], axis=-1).reshape(b, g * g, 4)
        return boxes, obj.reshape(b, g * g), cls.reshape(b, g * g, k)

    def forward_raw(self, images: np.ndarray) -> RawPrediction:
        x = np.ascontiguousarray(images, dtype=np.float64)
        samples = None
        if self._shakedrop_enabled:
            samples = [
                sample_shakedrop(self._shakedrop_rng, self._shakedrop_prob, self._shakedrop_spread)
                for _ in self.residual_blocks
            ]
        head, cache = self._features(x, samples)
        boxes, obj, cls = self._decode(head)
        g, k = self.grid, self.n_classes

        def backward_fn(d_obj: np.ndarray, d_cls: np.ndarray) -> np.ndarray:
            b = head.shape[0]
            d_head = np.zeros_like(head)
            d_head[..., 4] = d_obj.reshape(b, g, g) * obj.reshape(b, g, g) * (
                1.0 - obj.reshape(b, g, g)
            )
            p = cls.reshape(b, g, g, k)
            dc = d_cls.reshape(b, g, g, k)
            d_head[..., 5:] = p * (dc - (dc * p).sum(axis=-1, keepdims=True))
            d_x, _ = self._backward(cache, d_head, want_input=True, want_weights=False)
            return d_x

        return RawPrediction(boxes=boxes, objectness=obj, class_probs=cls, backward_fn=backward_fn)

    # -- backward --------------------------------------------------------

    def _backward(self, cache, d_head: np.ndarray, want_input: bool, want_weights: bool):
        p = self.params
        g = self.grid
        grads: dict[str, np.ndarray] = {}

        z3 = cache["z3"]
        if want_weights:
            grads["hw"], grads["hb"] = _kernels.conv2d_grad_weights(z3, d_head, 1, 0, 1, 1)
        d_z = _kernels.conv2d_grad_input(d_head, p["hw"], 1, 0, g, g)

        samples = cache["samples"]

        def res_backward(d_out, tag, sample):
            factor = 1.0
            if sample is not None:
                sample.draw_gamma(self._shakedrop_rng)
                factor = sample.backward_factor()
            d_branch = d_out * factor
            sa, da = cache[f"{tag}_sa"], cache[f"{tag}_da"]
            z_in = cache[f"{tag}_in"]
            if want_weights:
                grads[f"{tag}bw"], grads[f"{tag}bb"] = _kernels.conv2d_grad_weights(
                    sa, d_branch, 1, 1, 3, 3
                )
            d_sa = _kernels.conv2d_grad_input(d_branch, p[f"{tag}bw"], 1, 1, g, g)
            d_ha = d_sa * da
            if want_weights:
                grads[f"{tag}aw"], grads[f"{tag}ab"] = _kernels.conv2d_grad_weights(
                    z_in, d_ha, 1, 1, 3, 3
                )
            return d_out + _kernels.conv2d_grad_input(d_ha, p[f"{tag}aw"], 1, 1, g, g)

        d_z = res_backward(d_z, "r2", samples[1] if samples else None)
        d_z = res_backward(d_z, "r1", samples[0] if samples else None)

        s = self.input_size
        d_h3 = d_z * cache["d3"]
        if want_weights:
            grads["w3"], grads["b3"] = _kernels.conv2d_grad_weights(cache["a2"], d_h3, 2, 1, 3, 3)
        d_a2 = _kernels.conv2d_grad_input(d_h3, p["w3"], 2, 1, s // 4, s // 4)
        d_h2 = d_a2 * cache["d2"]
        if want_weights:
            grads["w2"], grads["b2"] = _kernels.conv2d_grad_weights(cache["a1"], d_h2, 2, 1, 3, 3)
        d_a1 = _kernels.conv2d_grad_input(d_h2, p["w2"], 2, 1, s // 2, s // 2)
        d_h1 = d_a1 * cache["d1"]
        if want_weights:
            grads["w1"], grads["b1"] = _kernels.conv2d_grad_weights(cache["a0"], d_h1, 2, 1, 3, 3)
        d_a0 = _kernels.conv2d_grad_input(d_h1, p["w1"], 2, 1, s, s)
        d_h0 = d_a0 * cache["d0"]
        if want_weights:
            grads["w0"], grads["b0"] = _kernels.conv2d_grad_weights(cache["x"], d_h0, 1, 1, 3, 3)
        d_x = None
        if want_input:
            d_x = _kernels.conv2d_grad_input(d_h0, p["w0"], 1, 1, s, s)
        return d_x, grads if want_weights else None

    # -- persistence -----------------------------------------------------

    def save_weights(self, path) -> None:
        arch = np.array(
            [self.input_size, self.width, self.n_classes], dtype=np.int64
        )
        np.savez(
            path,
            __arch__=arch,
            __anchor__=np.float64(self.anchor),
            **self.params,
        )

    def load_weights(self, path) -> None:
        with np.load(path) as data:
            arch = data["__arch__"]
            if tuple(arch) != (self.input_size, self.width, self.n_classes):
                raise ValueError(
                    f"weights at {path} are for input/width/classes {tuple(arch)}, "
                    f"adapter has {(self.input_size, self.width, self.n_classes)}"
                )
            self.anchor = float(data["__anchor__"])
            for name in _PARAM_NAMES:
                self.params[name] = np.ascontiguousarray(data[name], dtype=np.float64)

    @classmethod
    def from_weights(cls, path, name: str = "toy") -> "ToyDetector":
        with np.load(path) as data:
            size, width, k = (int(v) for v in data["__arch__"])
        det = cls(input_size=size, width=width, n_classes=k, name=name)
        det.load_weights(path)
        return det


def fit_toy_detector(
    det: ToyDetector,
    images: np.ndarray,
    annotations: list[list[tuple[BoundingBox, int]]],
    steps: int = 300,
    batch_size: int = 8,
    lr: float = 2e-3,
    rng: np.random.Generator | None = None,
    occlude_prob: float = 0.5,
    flip_prob: float = 0.5,
    color_policy: "AugmentationPolicy | None" = None,
) -> list[float]:
    """Briefly fit the detector on annotated images with a grid-cell loss.

    With some probability each object gets a benign occluder (solid color or
    noise square) pasted at its center during fitting, so the model learns to
    detect objects through generic occlusion rather than memorize open centers.
    Horizontal flips (with mirrored boxes) and an optional geometry-free color
    policy make the model robust to the transforms the attack loop augments
    with. Returns the per-step loss trace.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    g, k, s = det.grid, det.n_classes, det.input_size
    if color_policy is not None and (
        color_policy.crop_scale != (1.0, 1.0) or color_policy.rotation_deg != 0.0
    ):
        raise ValueError("color_policy must be geometry-free (no crop, no rotation)")

    def cell_targets(anns):
        t_obj = np.zeros((g, g))
        t_box = np.zeros((g, g, 4))
        t_cls = np.zeros((g, g), dtype=np.int64)
        has_gt = np.zeros((g, g), dtype=bool)
        for box, cid in anns:
            cx, cy = box.center
            gj = min(int(cx * g), g - 1)
            gi = min(int(cy * g), g - 1)
            t_obj[gi, gj] = 1.0
            t_box[gi, gj] = (
                cx * g - gj,
                cy * g - gi,
                np.log(max(box.width, 1e-4) / det.anchor),
                np.log(max(box.height, 1e-4) / det.anchor),
            )
            t_cls[gi, gj] = cid
            has_gt[gi, gj] = True
        return t_obj, t_box, t_cls, has_gt

    adam_m = {name: np.zeros_like(v) for name, v in det.params.items()}
    adam_v = {name: np.zeros_like(v) for name, v in det.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    noobj_w, box_w = 0.5, 5.0
    losses: list[float] = []

    for step in range(1, steps + 1):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        batch = images[idx].copy()
        t_obj = np.zeros((len(idx), g, g))
        t_box = np.zeros((len(idx), g, g, 4))
        t_cls = np.zeros((len(idx), g, g), dtype=np.int64)
        has_gt = np.zeros((len(idx), g, g), dtype=bool)
        for bi, i in enumerate(idx):
            anns = annotations[i]
            if flip_prob > 0.0 and rng.random() < flip_prob:
                batch[bi] = batch[bi, :, ::-1]
                anns = [
                    (BoundingBox(1.0 - b.x2, b.y1, 1.0 - b.x1, b.y2), c) for b, c in anns
                ]
            if color_policy is not None:
                from ..ensemble import augment

                batch[bi] = augment(batch[bi], color_policy, rng)
            for box, _ in anns:
                if occlude_prob > 0.0 and rng.random() < occlude_prob:
                    _paste_occluder(batch[bi], box, s, rng)
            t_obj[bi], t_box[bi], t_cls[bi], has_gt[bi] = cell_targets(anns)

        head, cache = det._features(np.ascontiguousarray(batch), None)
        tx, ty = head[..., 0], head[..., 1]
        tw, th = head[..., 2], head[..., 3]
        obj = _sigmoid(head[..., 4])
        cls = _softmax(head[..., 5:])

        to = t_obj
        tb = t_box
        tc = t_cls
        m = has_gt
        n_pos = max(int(m.sum()), 1)
        n_neg = max(int(obj.size - m.sum()), 1)

        # positives and negatives normalized separately so the few object
        # cells are not drowned out by the empty grid
        w_cell = np.where(to > 0.5, 1.0 / n_pos, noobj_w / n_neg)
        obj_c = np.clip(obj, 1e-12, 1.0 - 1e-12)
        loss_obj = float((w_cell * -(to * np.log(obj_c) + (1 - to) * np.log(1 - obj_c))).sum())
        sx, sy = _sigmoid(tx), _sigmoid(ty)
        err = np.stack([sx - tb[..., 0], sy - tb[..., 1], tw - tb[..., 2], th - tb[..., 3]], axis=-1)
        err *= m[..., None]
        loss_box = box_w * float((err**2).sum()) / n_pos
        onehot = np.eye(k)[tc]
        cls_c = np.clip(cls, 1e-12, 1.0)
        loss_cls = float((-(onehot * np.log(cls_c)).sum(axis=-1) * m).sum()) / n_pos
        losses.append(loss_obj + loss_box + loss_cls)

        d_head = np.zeros_like(head)
        d_head[..., 4] = w_cell * (obj - to)
        d_head[..., 0] = 2.0 * box_w * err[..., 0] * sx * (1 - sx) / n_pos
        d_head[..., 1] = 2.0 * box_w * err[..., 1] * sy * (1 - sy) / n_pos
        d_head[..., 2] = 2.0 * box_w * err[..., 2] / n_pos
        d_head[..., 3] = 2.0 * box_w * err[..., 3] / n_pos
        d_head[..., 5:] = (cls - onehot) * m[..., None] / n_pos

        _, grads = det._backward(cache, d_head, want_input=False, want_weights=True)
        for name, gval in grads.items():
            adam_m[name] = beta1 * adam_m[name] + (1 - beta1) * gval
            adam_v[name] = beta2 * adam_v[name] + (1 - beta2) * gval * gval
            m_hat = adam_m[name] / (1 - beta1**step)
            v_hat = adam_v[name] / (1 - beta2**step)
            det.params[name] = det.params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)

    return losses


def _paste_occluder(img: np.ndarray, box: BoundingBox, size: int, rng: np.random.Generator) -> None:
    side = int(rng.uniform(0.25, 0.5) * np.sqrt(box.width * box.height) * size)
    if side < 1:
        return
    cx, cy = box.center
    r0 = int(cy * size) - side // 2
    c0 = int(cx * size) - side // 2
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r0 + side, size), min(c0 + side, size)
    if r1 <= r0 or c1 <= c0:
        return
    kind = rng.random()
    if kind < 0.35:
        img[r0:r1, c0:c1] = rng.uniform(0.0, 1.0, size=3)
    elif kind < 0.7:
        img[r0:r1, c0:c1] = rng.uniform(0.0, 1.0, size=(r1 - r0, c1 - c0, 3))
    else:
        # flat extremes cover the classic control patches
        img[r0:r1, c0:c1] = rng.choice([0.0, 0.5, 1.0])
