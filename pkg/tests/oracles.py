"""Independent brute-force oracles used by the tests.

The AP oracle mirrors the matching rule but integrates the precision-recall
staircase by literal enumeration over exact rationals, so it shares no
arithmetic shortcuts with the implementation under test.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from blindpatch.core import BoundingBox


def ap_oracle(
    gt_boxes: list[list[BoundingBox]],
    preds: list[list[tuple[BoundingBox, float]]],
    iou_thr: float = 0.5,
) -> float:
    """All-point interpolated AP on 0-100, computed with Fractions."""
    n_gt = sum(len(g) for g in gt_boxes)
    flat = [(float(s), img, box) for img, plist in enumerate(preds) for box, s in plist]
    if n_gt == 0:
        return 100.0 if not flat else 0.0
    if not flat:
        return 0.0

    scores = np.array([f[0] for f in flat])
    order = np.argsort(-scores, kind="stable")
    matched = [[False] * len(g) for g in gt_boxes]
    tp_flags: list[bool] = []
    for oi in order:
        _, img, box = flat[oi]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes[img]):
            if matched[img][j]:
                continue
            iou = box.iou(gt)
            if iou >= iou_thr and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[img][best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    n = len(tp_flags)
    tp_cum = 0
    recalls: list[Fraction] = []
    precisions: list[Fraction] = []
    for k in range(n):
        tp_cum += int(tp_flags[k])
        recalls.append(Fraction(tp_cum, n_gt))
        precisions.append(Fraction(tp_cum, k + 1))

    # area under the monotone envelope, enumerated point by point
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for k in range(n):
        dr = recalls[k] - prev_recall
        if dr > 0:
            p_max = max(precisions[j] for j in range(k, n))
            ap += dr * p_max
        prev_recall = recalls[k]
    return float(ap * 100)


def random_ap_instance(rng: np.random.Generator, max_gt: int = 5, max_preds: int = 5):
    """One random single-class AP problem over up to 2 images."""
    n_images = int(rng.integers(1, 3))
    gt: list[list[BoundingBox]] = [[] for _ in range(n_images)]
    preds: list[list[tuple[BoundingBox, float]]] = [[] for _ in range(n_images)]

    def rand_box() -> BoundingBox:
        x1 = rng.uniform(0.0, 0.7)
        y1 = rng.uniform(0.0, 0.7)
        return BoundingBox(x1, y1, x1 + rng.uniform(0.1, 0.3), y1 + rng.uniform(0.1, 0.3))

    for _ in range(int(rng.integers(0, max_gt + 1))):
        gt[int(rng.integers(0, n_images))].append(rand_box())
    for _ in range(int(rng.integers(0, max_preds + 1))):
        img = int(rng.integers(0, n_images))
        if gt[img] and rng.random() < 0.6:
            # jittered copy of a gt box so matches actually occur
            src = gt[img][int(rng.integers(0, len(gt[img])))]
            dx = rng.uniform(-0.05, 0.05)
            dy = rng.uniform(-0.05, 0.05)
            box = BoundingBox(
                float(np.clip(src.x1 + dx, 0.0, 0.89)),
                float(np.clip(src.y1 + dy, 0.0, 0.89)),
                float(np.clip(src.x2 + dx, 0.1, 1.0)),
                float(np.clip(src.y2 + dy, 0.1, 1.0)),
            )
        else:
            box = rand_box()
        score = float(rng.choice([0.3, 0.5, 0.5, 0.7, 0.9, rng.uniform(0, 1)]))
        preds[img].append((box, score))
    return gt, preds
