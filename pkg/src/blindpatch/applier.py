"""Differentiable placement of the patch onto detected target objects.

Each target-class detection gets a square patch copy at the box center whose
side is the configured fraction of the box's geometric-mean side length.
Compositing is an opaque overwrite; gradients flow from written image pixels
back to patch pixels through the bilinear resampling weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, ensemble
from .core import AdversarialPatch, BoundingBox, DetectionSet
from .util import round_half_up


@dataclass(frozen=True)
class PoseJitter:
    """Per-placement pose perturbation: rotation, brightness, contrast, center shift."""

    rotation_deg: float = 20.0
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.9, 1.1)
    center_frac: float = 0.0

    def sample(self, rng: np.random.Generator) -> tuple[float, float, float, float, float]:
        angle = rng.uniform(-self.rotation_deg, self.rotation_deg) if self.rotation_deg else 0.0
        bright = rng.uniform(-self.brightness, self.brightness) if self.brightness else 0.0
        clo, chi = self.contrast
        contrast = rng.uniform(clo, chi) if (clo, chi) != (1.0, 1.0) else 1.0
        if self.center_frac > 0.0:
            dx = rng.uniform(-self.center_frac, self.center_frac)
            dy = rng.uniform(-self.center_frac, self.center_frac)
        else:
            dx = dy = 0.0
        return float(angle), float(bright), float(contrast), float(dx), float(dy)


@dataclass(frozen=True)
class Placement:
    """Geometry of one pasted patch copy, in pixel coordinates."""

    box: BoundingBox
    side: int
    center: tuple[float, float]
    rotation: float
    clipped: bool


def compute_placement(
    box: BoundingBox,
    scale: float,
    image_size: int,
    jitter: PoseJitter | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Placement, tuple[float, float]] | None:
    """Place a square of side scale * sqrt(w*h) at the (optionally jittered) box center.

    Returns (placement, (brightness, contrast)), or None when the side rounds
    to zero pixels (degenerate box at this scale).
    """
    if not (0.0 < scale <= 1.0):
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    if image_size < 1:
        raise ValueError("image_size must be >= 1")
    w_px = box.width * image_size
    h_px = box.height * image_size
    side = round_half_up(scale * float(np.sqrt(w_px * h_px)))
    if side < 1:
        return None

    cx = 0.5 * (box.x1 + box.x2) * image_size
    cy = 0.5 * (box.y1 + box.y2) * image_size
    angle, bright, contrast = 0.0, 0.0, 1.0
    if jitter is not None:
        if rng is None:
            raise ValueError("rng required when jitter is enabled")
        angle, bright, contrast, dxf, dyf = jitter.sample(rng)
        # keep the jittered center inside the target box
        cx = float(np.clip(cx + dxf * w_px / 2.0, box.x1 * image_size, box.x2 * image_size))
        cy = float(np.clip(cy + dyf * h_px / 2.0, box.y1 * image_size, box.y2 * image_size))

    r0 = round_half_up(cy - side / 2.0)
    c0 = round_half_up(cx - side / 2.0)
    clipped = r0 < 0 or c0 < 0 or r0 + side > image_size or c0 + side > image_size
    placement = Placement(box=box, side=side, center=(cx, cy), rotation=angle, clipped=clipped)
    return placement, (bright, contrast)


@dataclass
class _PlacedRegion:
    image_index: int
    serial: int
    rows: np.ndarray
    cols: np.ndarray
    sample_ys: np.ndarray
    sample_xs: np.ndarray
    contrast: float
    pass_mask: np.ndarray  # False where the [0,1] image clip was active
    grad_gate: np.ndarray | None  # (h, w) 1-mask from cutout, None when no cutout


@dataclass
class ApplyResult:
    """Patched batch plus the bookkeeping needed to push gradients to the patch."""

    images: np.ndarray
    placements: list[list[Placement]]
    skipped: int
    patch_shape: tuple[int, int]
    _regions: list[_PlacedRegion] = field(default_factory=list, repr=False)
    _owner: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_placements(self) -> int:
        return sum(len(p) for p in self.placements)

    def grad_to_patch(self, grad_images: np.ndarray) -> np.ndarray:
        """Backpropagate an image-space gradient onto the patch pixels."""
        h, w = self.patch_shape
        grad = np.zeros((h, w, 3))
        if self._owner is None:
            return grad
        grad_images = np.asarray(grad_images, dtype=np.float64)
        for reg in self._regions:
            own = self._owner[reg.image_index, reg.rows, reg.cols] == reg.serial
            sel = own[:, None] & reg.pass_mask
            g = grad_images[reg.image_index, reg.rows, reg.cols] * sel * reg.contrast
            gview = _kernels.bilinear_scatter(g, reg.sample_ys, reg.sample_xs, h, w)
            if reg.grad_gate is not None:
                gview = gview * reg.grad_gate[..., None]
            grad += gview
        return grad


def apply_patch(
    images: np.ndarray,
    detections: list[DetectionSet],
    patch: AdversarialPatch | np.ndarray,
    scale: float,
    target_class: int,
    jitter: PoseJitter | None = None,
    cutout: ensemble.CutoutSpec | None = None,
    rng: np.random.Generator | None = None,
) -> ApplyResult:
    """Composite the patch over every target-class detection in the batch.

    Images without target detections pass through unchanged. Pose jitter and
    cutout are drawn independently per placement when enabled.
    """
    px = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64)
    ph, pw = px.shape[0], px.shape[1]
    out = np.array(images, dtype=np.float64, copy=True)
    bsz, size = out.shape[0], out.shape[1]
    if len(detections) != bsz:
        raise ValueError(f"{len(detections)} detection sets for a batch of {bsz}")

    placements: list[list[Placement]] = [[] for _ in range(bsz)]
    regions: list[_PlacedRegion] = []
    owner = None
    skipped = 0
    serial = 0

    for b, dset in enumerate(detections):
        for det in dset.of_class(target_class):
            placed = compute_placement(det.box, scale, size, jitter=jitter, rng=rng)
            if placed is None:
                skipped += 1
                continue
            placement, (bright, contrast) = placed
            side = placement.side
            cx, cy = placement.center
            r0 = round_half_up(cy - side / 2.0)
            c0 = round_half_up(cx - side / 2.0)
            rr = np.arange(max(r0, 0), min(r0 + side, size))
            cc = np.arange(max(c0, 0), min(c0 + side, size))
            if rr.size == 0 or cc.size == 0:
                placements[b].append(placement)
                continue
            gy, gx = np.meshgrid(rr, cc, indexing="ij")
            rows = gy.ravel()
            cols = gx.ravel()
            dy = rows + 0.5 - cy
            dx = cols + 0.5 - cx
            if placement.rotation != 0.0:
                th = np.deg2rad(placement.rotation)
                c_, s_ = np.cos(th), np.sin(th)
                du = c_ * dx + s_ * dy
                dv = -s_ * dx + c_ * dy
            else:
                du, dv = dx, dy
            sample_ys = (dv / side + 0.5) * ph - 0.5
            sample_xs = (du / side + 0.5) * pw - 0.5

            if cutout is not None:
                if rng is None:
                    raise ValueError("rng required when cutout is enabled")
                view, mask = ensemble.maybe_cutout(px, cutout.prob, cutout.ratio, cutout.fill, rng)
                gate = None if mask is None else 1.0 - mask
            else:
                view, gate = px, None

            vals = _kernels.bilinear_gather(np.ascontiguousarray(view), sample_ys, sample_xs)
            raw = vals * contrast + bright
            pass_mask = (raw >= 0.0) & (raw <= 1.0)
            out[b, rows, cols] = np.clip(raw, 0.0, 1.0)
            if owner is None:
                owner = np.full((bsz, size, size), -1, dtype=np.int64)
            owner[b, rows, cols] = serial
            regions.append(
                _PlacedRegion(
                    image_index=b,
                    serial=serial,
                    rows=rows,
                    cols=cols,
                    sample_ys=sample_ys,
                    sample_xs=sample_xs,
                    contrast=contrast,
                    pass_mask=pass_mask,
                    grad_gate=gate,
                )
            )
            placements[b].append(placement)
            serial += 1

    return ApplyResult(
        images=out,
        placements=placements,
        skipped=skipped,
        patch_shape=(ph, pw),
        _regions=regions,
        _owner=owner,
    )
