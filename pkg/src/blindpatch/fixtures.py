"""Synthetic shapes dataset: high-contrast squares and discs on textured
backgrounds, with exact bounding boxes. This is the desk-scale stand-in for a
person-detection corpus; class 0 is the square ("box"), class 1 the disc.

Run ``python -m blindpatch.fixtures --out DIR`` to write the images as PNGs
(and optionally fit and save toy-detector weights on them).
"""

from __future__ import annotations

import numpy as np

from .core import BoundingBox

CLASS_SQUARE = 0
CLASS_DISC = 1


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    # low-frequency noise: random 4x4 color grid upsampled smoothly
    base = rng.uniform(0.1, 0.9, size=(4, 4, 3))
    ys = np.linspace(0, 3, size)
    xs = np.linspace(0, 3, size)
    y0 = np.floor(ys).astype(int).clip(0, 2)
    x0 = np.floor(xs).astype(int).clip(0, 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    tl = base[y0][:, x0]
    tr = base[y0][:, x0 + 1]
    bl = base[y0 + 1][:, x0]
    br = base[y0 + 1][:, x0 + 1]
    img = (1 - fy) * ((1 - fx) * tl + fx * tr) + fy * ((1 - fx) * bl + fx * br)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _contrasting_color(bg_mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    color = rng.uniform(0.0, 1.0, size=3)
    flip = np.abs(color - bg_mean) < 0.35
    color[flip] = np.where(bg_mean[flip] > 0.5, color[flip] * 0.3, 1.0 - color[flip] * 0.3)
    return np.clip(color, 0.0, 1.0)


def make_shapes_dataset(
    count: int,
    size: int = 64,
    rng: np.random.Generator | None = None,
    two_classes: bool = True,
) -> tuple[np.ndarray, list[list[tuple[BoundingBox, int]]]]:
    """Generate images plus per-image (box, class) annotations."""
    rng = rng if rng is not None else np.random.default_rng(0)
    images = np.empty((count, size, size, 3))
    annotations: list[list[tuple[BoundingBox, int]]] = []
    for i in range(count):
        img = _background(size, rng)
        anns: list[tuple[BoundingBox, int]] = []
        n_shapes = 1 if rng.random() < 0.6 else 2
        occupied: list[tuple[float, float]] = []
        for _ in range(n_shapes):
            side_frac = rng.uniform(0.35, 0.55)
            half = side_frac / 2.0
            for _attempt in range(8):
                cx = rng.uniform(half + 0.02, 1.0 - half - 0.02)
                cy = rng.uniform(half + 0.02, 1.0 - half - 0.02)
                if all(abs(cx - ox) + abs(cy - oy) > side_frac for ox, oy in occupied):
                    break
            else:
                continue
            occupied.append((cx, cy))
            color = _contrasting_color(img.mean(axis=(0, 1)), rng)
            cls = CLASS_SQUARE if (not two_classes or rng.random() < 0.6) else CLASS_DISC
            x1, x2 = cx - half, cx + half
            y1, y2 = cy - half, cy + half
            r0, r1 = int(y1 * size), int(np.ceil(y2 * size))
            c0, c1 = int(x1 * size), int(np.ceil(x2 * size))
            if cls == CLASS_SQUARE:
                img[r0:r1, c0:c1] = color
                # thin darker border makes edges crisp
                img[r0, c0:c1] = color * 0.5
                img[r1 - 1, c0:c1] = color * 0.5
                img[r0:r1, c0] = color * 0.5
                img[r0:r1, c1 - 1] = color * 0.5
            else:
                yy, xx = np.mgrid[r0:r1, c0:c1]
                inside = ((yy + 0.5) / size - cy) ** 2 + ((xx + 0.5) / size - cx) ** 2 <= half**2
                region = img[r0:r1, c0:c1]
                region[inside] = color
                img[r0:r1, c0:c1] = region
            anns.append((BoundingBox(x1, y1, x2, y2), cls))
        images[i] = np.clip(img, 0.0, 1.0)
        annotations.append(anns)
    return images, annotations


def _main() -> int:
    import argparse
    from pathlib import Path

    from PIL import Image

    parser = argparse.ArgumentParser(description="generate the synthetic shapes dataset")
    parser.add_argument("--out", required=True, help="output directory for PNG images")
    parser.add_argument("--count", type=int, default=64)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--fit-toy",
        metavar="WEIGHTS",
        help="also briefly fit the built-in toy detector and save weights here",
    )
    parser.add_argument("--fit-steps", type=int, default=300)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    images, annotations = make_shapes_dataset(args.count, args.size, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        arr = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(out / f"shapes_{i:04d}.png")
    print(f"wrote {len(images)} images to {out}")

    if args.fit_toy:
        from .detector.toy import ToyDetector, fit_toy_detector

        det = ToyDetector(input_size=args.size)
        losses = fit_toy_detector(
            det, images, annotations, steps=args.fit_steps, rng=np.random.default_rng(args.seed)
        )
        det.save_weights(args.fit_toy)
        print(f"fitted toy detector: loss {losses[0]:.3f} -> {losses[-1]:.3f}, saved {args.fit_toy}")
    return 0


if __name__ == "__main__":
    raise SystemExit(_main())
