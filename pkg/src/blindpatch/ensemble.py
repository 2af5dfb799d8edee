"""Self-ensemble strategies: constrained image augmentation, stochastic
residual-branch scaling (forward/backward with independent factors), and
patch cutout masking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .util import round_half_up

# RGB <-> YIQ, used for hue rotation
_RGB_TO_YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]]
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


@dataclass
class AugmentationPolicy:
    """Mild, natural-scene-plausible augmentation ranges.

    The ranges are deliberately constrained: crop keeps at least 70% of the
    area, rotation stays within +/-10 degrees, color magnitudes within 0.2.
    """

    flip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.1
    rotation_deg: float = 5.0

    def __post_init__(self) -> None:
        lo, hi = self.crop_scale
        if not (0.7 <= lo <= hi <= 1.0):
            raise ValueError(f"crop_scale must satisfy 0.7 <= lo <= hi <= 1, got {self.crop_scale}")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must be in [0, 1]")
        if not (0.0 <= self.rotation_deg <= 10.0):
            raise ValueError("rotation_deg must be in [0, 10]")
        for name in ("brightness", "contrast", "saturation", "hue"):
            v = getattr(self, name)
            if not (0.0 <= v <= 0.2):
                raise ValueError(f"{name} magnitude must be in [0, 0.2], got {v}")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(
            flip_prob=0.0,
            crop_scale=(1.0, 1.0),
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            hue=0.0,
            rotation_deg=0.0,
        )


def _affine_resample(img: np.ndarray, src_ys: np.ndarray, src_xs: np.ndarray) -> np.ndarray:
    h, w, _ = img.shape
    vals = _kernels.bilinear_gather(img, src_ys.ravel(), src_xs.ravel())
    return vals.reshape(h, w, 3)


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply one random draw of the policy; output keeps shape and [0,1] range."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape

    if policy.flip_prob > 0.0 and rng.random() < policy.flip_prob:
        img = img[:, ::-1, :]

    if policy.brightness > 0.0:
        img = img * rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness)
    if policy.contrast > 0.0:
        f = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
        mean = img.mean()
        img = mean + f * (img - mean)
    if policy.saturation > 0.0:
        f = rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation)
        gray = img @ _RGB_TO_YIQ[0]
        img = gray[..., None] + f * (img - gray[..., None])
    if policy.hue > 0.0:
        angle = rng.uniform(-policy.hue, policy.hue) * 2.0 * np.pi
        yiq = img @ _RGB_TO_YIQ.T
        c, s = np.cos(angle), np.sin(angle)
        i, q = yiq[..., 1].copy(), yiq[..., 2].copy()
        yiq[..., 1] = c * i - s * q
        yiq[..., 2] = s * i + c * q
        img = yiq @ _YIQ_TO_RGB.T

    lo, hi = policy.crop_scale
    if hi < 1.0 or lo < 1.0:
        area = rng.uniform(lo, hi)
        side = np.sqrt(area)
        ch = max(1, round_half_up(h * side))
        cw = max(1, round_half_up(w * side))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        ys = top + (np.arange(h) + 0.5) * (ch / h) - 0.5
        xs = left + (np.arange(w) + 0.5) * (cw / w) - 0.5
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        img = _affine_resample(np.ascontiguousarray(img), gy, gx)

    if policy.rotation_deg > 0.0:
        theta = np.deg2rad(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        dy, dx = yy - cy, xx - cx
        c, s = np.cos(theta), np.sin(theta)
        src_y = cy + c * dy - s * dx
        src_x = cx + s * dy + c * dx
        img = _affine_resample(np.ascontiguousarray(img), src_y, src_x)

    return np.clip(img, 0.0, 1.0)


@dataclass
class ShakeDropSample:
    """One stochastic draw for a residual block.

    The forward pass scales the branch by (beta + alpha - beta*alpha); the
    backward pass replaces beta with an independent, identically distributed
    gamma drawn at backward time.
    """

    beta: int
    alpha: float
    prob: float
    gamma: int | None = None
    _forwarded: bool = field(default=False, repr=False)

    def forward_factor(self) -> float:
        # branch form keeps beta=1 bit-identical to the plain residual sum
        return 1.0 if self.beta == 1 else self.alpha

    def backward_factor(self) -> float:
        if self.gamma is None:
            raise RuntimeError("backward factor requested before gamma was drawn")
        return 1.0 if self.gamma == 1 else self.alpha

    def draw_gamma(self, rng: np.random.Generator) -> int:
        if self.gamma is None:
            self.gamma = 1 if rng.random() < self.prob else 0
        return self.gamma


def sample_shakedrop(rng: np.random.Generator, prob: float, spread: float) -> ShakeDropSample:
    """Draw beta ~ Bernoulli(prob) and alpha ~ U(1-spread, 1+spread)."""
    beta = 1 if rng.random() < prob else 0
    alpha = float(rng.uniform(1.0 - spread, 1.0 + spread))
    return ShakeDropSample(beta=beta, alpha=alpha, prob=prob)


def shakedrop_forward(z: np.ndarray, branch_out: np.ndarray, sample: ShakeDropSample) -> np.ndarray:
    """Combine a block input with its stacked-layer output under the sampled factor."""
    z = np.asarray(z, dtype=np.float64)
    branch_out = np.asarray(branch_out, dtype=np.float64)
    if z.shape != branch_out.shape:
        raise ValueError(f"shape mismatch: identity {z.shape} vs branch {branch_out.shape}")
    sample._forwarded = True
    return z + sample.forward_factor() * branch_out


def shakedrop_backward(
    upstream: np.ndarray,
    sample: ShakeDropSample,
    branch_jacobian: np.ndarray | float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Propagate an upstream gradient through the block with the backward factor.

    ``branch_jacobian`` is dF/dz for the elementwise / scalar block case; the
    result is upstream * (1 + factor * dF/dz).
    """
    if not sample._forwarded:
        raise RuntimeError("shakedrop_backward called without a recorded forward pass")
    if sample.gamma is None:
        if rng is None:
            raise RuntimeError("gamma not drawn and no rng provided")
        sample.draw_gamma(rng)
    return np.asarray(upstream, dtype=np.float64) * (
        1.0 + sample.backward_factor() * np.asarray(branch_jacobian, dtype=np.float64)
    )


@dataclass(frozen=True)
class CutoutSpec:
    """Per-placement cutout parameters: probability, square ratio, fill value."""

    prob: float = 0.9
    ratio: float = 0.4
    fill: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 <= self.prob <= 1.0 and 0.0 <= self.ratio <= 1.0 and 0.0 <= self.fill <= 1.0):
            raise ValueError("cutout prob, ratio and fill must all lie in [0, 1]")


def cutout(
    pixels: np.ndarray,
    p: tuple[int, int] | None,
    ratio: float,
    fill: float,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask a ratio-scaled square centered at p=(x0, y0) with the fill value.

    Returns (masked view, mask) where mask is 1 inside the covered square.
    The input array is never modified; masked pixels carry no gradient back
    to the patch for the step that uses the view.
    """
    px = np.asarray(pixels, dtype=np.float64)
    h, w = px.shape[0], px.shape[1]
    if p is None:
        if rng is None:
            raise ValueError("rng required when the cutout center is not given")
        p = (int(rng.integers(0, w)), int(rng.integers(0, h)))
    x0, y0 = p
    if not (0 <= x0 < w and 0 <= y0 < h):
        raise ValueError(f"cutout center {p} outside {h}x{w} patch")

    size_h = round_half_up(ratio * h)
    size_w = round_half_up(ratio * w)
    mask = np.zeros((h, w), dtype=np.float64)
    if size_h > 0 and size_w > 0:
        r0 = max(0, y0 - size_h // 2)
        r1 = min(h, y0 - size_h // 2 + size_h)
        c0 = max(0, x0 - size_w // 2)
        c1 = min(w, x0 - size_w // 2 + size_w)
        mask[r0:r1, c0:c1] = 1.0
    view = px * (1.0 - mask[..., None]) + fill * mask[..., None]
    return view, mask


def maybe_cutout(
    pixels: np.ndarray,
    prob: float,
    ratio: float,
    fill: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | None]:
    """With the given probability, cut out a square at a uniform random center."""
    if not (0.0 <= prob <= 1.0):
        raise ValueError("cutout probability must be in [0, 1]")
    if rng.random() < prob:
        return cutout(pixels, None, ratio, fill, rng)
    return np.asarray(pixels, dtype=np.float64), None
