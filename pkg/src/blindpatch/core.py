"""Domain types shared across the package: patches, boxes, detections, history.

Patch pixels are canonically float32 in [0,1] so the raw-float sidecar
round-trips bit-exactly; all numeric pipelines upcast to float64 internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import IntegrityError, PatchLoadError
from .util import atomic_write_bytes, atomic_write_text, canonical_json, sha256_hex

PATCH_MAGIC = b"TSEA"
PATCH_VERSION = 1
# magic, version u16, height u32, width u32, padded to 16 bytes, little-endian
_PATCH_HEADER = struct.Struct("<4sHII2x")

PATCH_SUFFIXES = (".png", ".patch", ".json")


@dataclass
class AdversarialPatch:
    """A trainable pixel grid in [0,1] with free-form provenance metadata."""

    pixels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"patch pixels must be (h, w, 3) with h, w >= 1, got {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("patch pixels must lie in [0, 1]")
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def digest(self) -> str:
        """Content hash tying this exact pixel grid to its training config."""
        cfg = str(self.meta.get("config_digest", ""))
        return sha256_hex(self.pixels.tobytes(), cfg.encode())

    def copy(self) -> "AdversarialPatch":
        return AdversarialPatch(self.pixels.copy(), dict(self.meta))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(
                f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2}): "
                "need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def area(self) -> float:
        return self.width * self.height

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0.0, min(self.x2, other.x2) - max(self.x1, other.x1))
        iy = max(0.0, min(self.y2, other.y2) - max(self.y1, other.y1))
        inter = ix * iy
        union = self.area() + other.area() - inter
        return inter / union if union > 0.0 else 0.0


@dataclass(frozen=True)
class Detection:
    """One detector output: a box with objectness and class confidence."""

    box: BoundingBox
    objectness: float
    class_id: int
    class_score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.objectness <= 1.0 and 0.0 <= self.class_score <= 1.0):
            raise ValueError("objectness and class_score must lie in [0, 1]")


@dataclass
class DetectionSet:
    """Detections for one image of a batch."""

    detections: list[Detection]
    image_index: int
    raw_candidates: bool = False

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self) -> Iterator[Detection]:
        return iter(self.detections)

    def of_class(self, class_id: int) -> list[Detection]:
        return [d for d in self.detections if d.class_id == class_id]


@dataclass
class EpochRecord:
    epoch: int
    det_loss: float
    tv_loss: float
    lr: float
    wall_time: float
    skipped_batches: int = 0


@dataclass
class TrainHistory:
    """Per-epoch training trace; the learning-rate sequence may never increase."""

    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.lr > self.records[-1].lr:
            raise ValueError(
                f"learning rate increased: {self.records[-1].lr} -> {rec.lr} at epoch {rec.epoch}"
            )
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_dicts(self) -> list[dict]:
        return [vars(r).copy() for r in self.records]

    @classmethod
    def from_dicts(cls, rows: list[dict]) -> "TrainHistory":
        hist = cls()
        for row in rows:
            hist.append(EpochRecord(**row))
        return hist


def patch_init(
    height: int,
    width: int,
    mode: str = "random",
    source: str | Path | None = None,
    rng: np.random.Generator | None = None,
) -> AdversarialPatch:
    """Create a patch: gray (0.5), white (1.0), random uniform, or from a file."""
    if height < 1 or width < 1:
        raise ValueError(f"patch dimensions must be >= 1, got {height}x{width}")
    if (source is not None) != (mode == "from_file"):
        raise ValueError("source must be given exactly when mode='from_file'")

    if mode == "gray":
        px = np.full((height, width, 3), 0.5, dtype=np.float32)
    elif mode == "white":
        px = np.ones((height, width, 3), dtype=np.float32)
    elif mode == "random":
        rng = rng if rng is not None else np.random.default_rng()
        px = rng.uniform(0.0, 1.0, size=(height, width, 3)).astype(np.float32)
    elif mode == "from_file":
        loaded = load_patch(source)
        px = loaded.pixels
        if px.shape[:2] != (height, width):
            px = _resize_pixels(px, height, width)
    else:
        raise ValueError(f"unknown patch init mode {mode!r}")

    return AdversarialPatch(px, meta={"init_mode": mode})


def _resize_pixels(px: np.ndarray, height: int, width: int) -> np.ndarray:
    from . import _kernels

    ys = (np.arange(height) + 0.5) * (px.shape[0] / height) - 0.5
    xs = (np.arange(width) + 0.5) * (px.shape[1] / width) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    vals = _kernels.bilinear_gather(px.astype(np.float64), gy.ravel(), gx.ravel())
    return np.clip(vals.reshape(height, width, 3), 0.0, 1.0).astype(np.float32)


def _base_path(path: str | Path) -> Path:
    p = Path(path)
    if p.suffix in PATCH_SUFFIXES:
        return p.with_suffix("")
    return p


def save_patch(patch: AdversarialPatch, path: str | Path) -> dict[str, Path]:
    """Persist a patch as <base>.png + <base>.patch sidecar + <base>.json metadata."""
    base = _base_path(path)
    png_path = base.with_suffix(".png")
    sidecar_path = base.with_suffix(".patch")
    meta_path = base.with_suffix(".json")

    quant = np.round(patch.pixels.astype(np.float64) * 255.0).astype(np.uint8)
    import io

    buf = io.BytesIO()
    Image.fromarray(quant, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(png_path, buf.getvalue())

    raw = patch.pixels.astype("<f4").tobytes()
    header = _PATCH_HEADER.pack(PATCH_MAGIC, PATCH_VERSION, patch.height, patch.width)
    atomic_write_bytes(sidecar_path, header + raw)

    meta = dict(patch.meta)
    meta.update(
        {
            "height": patch.height,
            "width": patch.width,
            "pixel_sha256": sha256_hex(raw),
            "digest": patch.digest(),
        }
    )
    atomic_write_text(meta_path, canonical_json(meta))
    return {"png": png_path, "sidecar": sidecar_path, "meta": meta_path}


def load_patch(path: str | Path) -> AdversarialPatch:
    """Load a patch, preferring the lossless sidecar over the 8-bit image."""
    base = _base_path(path)
    sidecar_path = base.with_suffix(".patch")
    png_path = base.with_suffix(".png")
    meta_path = base.with_suffix(".json")

    given = Path(path)
    if given.suffix == ".patch" or (given.suffix == "" and sidecar_path.exists()):
        return _load_sidecar(sidecar_path, meta_path)
    if given.suffix == ".png" or png_path.exists():
        return _load_png(png_path, meta_path)
    if sidecar_path.exists():
        return _load_sidecar(sidecar_path, meta_path)
    raise PatchLoadError(f"no patch found at {base}{{.patch,.png}}")


def _read_meta(meta_path: Path) -> dict:
    if not meta_path.exists():
        return {}
    import json

    try:
        return json.loads(meta_path.read_text())
    except ValueError as exc:
        raise IntegrityError(f"corrupt patch metadata {meta_path}: {exc}") from exc


def _load_sidecar(sidecar_path: Path, meta_path: Path) -> AdversarialPatch:
    if not sidecar_path.exists():
        raise PatchLoadError(f"missing patch sidecar {sidecar_path}")
    blob = sidecar_path.read_bytes()
    if len(blob) < _PATCH_HEADER.size:
        raise IntegrityError(f"{sidecar_path}: truncated header")
    magic, version, height, width = _PATCH_HEADER.unpack_from(blob)
    if magic != PATCH_MAGIC:
        raise IntegrityError(f"{sidecar_path}: bad magic {magic!r}, expected {PATCH_MAGIC!r}")
    if version != PATCH_VERSION:
        raise IntegrityError(f"{sidecar_path}: unsupported version {version}")
    raw = blob[_PATCH_HEADER.size :]
    expected = height * width * 3 * 4
    if len(raw) != expected:
        raise IntegrityError(
            f"{sidecar_path}: payload is {len(raw)} bytes, expected {expected} "
            f"for a {height}x{width}x3 float32 grid"
        )
    meta = _read_meta(meta_path)
    recorded = meta.get("pixel_sha256")
    if recorded is not None and recorded != sha256_hex(raw):
        raise IntegrityError(f"{sidecar_path}: pixel digest mismatch against {meta_path}")
    px = np.frombuffer(raw, dtype="<f4").reshape(height, width, 3)
    return AdversarialPatch(px.copy(), meta=meta)


def _load_png(png_path: Path, meta_path: Path) -> AdversarialPatch:
    if not png_path.exists():
        raise PatchLoadError(f"missing patch image {png_path}")
    try:
        img = Image.open(png_path).convert("RGB")
    except Exception as exc:
        raise PatchLoadError(f"cannot decode {png_path}: {exc}") from exc
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PatchLoadError(f"{png_path}: expected an RGB image (h, w, 3), got {arr.shape}")
    return AdversarialPatch(arr, meta=_read_meta(meta_path))
