"""Directory-of-images dataset with stable ordering and letterbox resizing."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .errors import ConfigError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def letterbox(image: np.ndarray, size: int, fill: float = 0.5) -> np.ndarray:
    """Aspect-preserving resize onto a size x size canvas, padded with gray."""
    h, w = image.shape[0], image.shape[1]
    scale = size / max(h, w)
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    resized = _kernels.bilinear_gather(
        np.ascontiguousarray(image, dtype=np.float64), gy.ravel(), gx.ravel()
    ).reshape(nh, nw, 3)
    canvas = np.full((size, size, 3), fill, dtype=np.float64)
    top = (size - nh) // 2
    left = (size - nw) // 2
    canvas[top : top + nh, left : left + nw] = resized
    return np.clip(canvas, 0.0, 1.0)


class ImageDataset:
    """Lexicographically ordered images under a root directory, decoded to
    [0,1] RGB and letterboxed to the requested square size."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigError(f"dataset root {self.root} is not a directory")
        self.paths = sorted(
            p for p in self.root.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not self.paths:
            raise ConfigError(f"no images with extensions {IMAGE_EXTENSIONS} under {self.root}")

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, index: int, size: int) -> np.ndarray:
        with Image.open(self.paths[index]) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return letterbox(arr, size)

    def load_all(self, size: int) -> tuple[np.ndarray, list[Path]]:
        """Decode every image; undecodable files are skipped and reported."""
        images = []
        skipped: list[Path] = []
        for i, path in enumerate(self.paths):
            try:
                images.append(self.load(i, size))
            except Exception:  # noqa: BLE001 - per-image skip contract
                skipped.append(path)
        if not images:
            raise ConfigError(f"every image under {self.root} failed to decode")
        return np.stack(images), skipped
