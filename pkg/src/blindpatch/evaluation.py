"""mAP evaluation against clean predictions as pseudo-ground-truth, plus the
patch x detector transfer matrix with control-patch baselines."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .applier import PoseJitter, apply_patch
from .core import AdversarialPatch, BoundingBox, DetectionSet
from .detector.base import DetectorAdapter, create_adapter
from .ensemble import CutoutSpec

_EVAL_BATCH = 16


@dataclass
class EvalConfig:
    """Evaluation knobs: matching threshold, final-stage filtering, and the
    patch scale applied at inference (an explicit field, not a constant)."""

    iou_thr: float = 0.5
    conf_thresh: float = 0.25
    nms_iou: float = 0.45
    patch_scale: float = 0.15
    target_class: int = 0
    jitter: PoseJitter | None = None
    cutout: CutoutSpec | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_thr < 1.0):
            raise ValueError("iou_thr must lie in (0, 1)")
        if not (0.0 < self.patch_scale <= 1.0):
            raise ValueError("patch_scale must lie in (0, 1]")


def average_precision(
    gt_boxes: list[list[BoundingBox]],
    preds: list[list[tuple[BoundingBox, float]]],
    iou_thr: float = 0.5,
) -> float:
    """Single-class AP on the 0-100 scale.

    Predictions are sorted by descending score (stable on ties), matched
    greedily one-to-one to the highest-IoU unmatched ground truth of the same
    image at IoU >= iou_thr, and the precision-recall staircase is integrated
    with all-point interpolation.
    """
    n_gt = sum(len(g) for g in gt_boxes)
    flat: list[tuple[float, int, BoundingBox]] = []
    for img, plist in enumerate(preds):
        for box, score in plist:
            flat.append((float(score), img, box))
    if n_gt == 0:
        return 100.0 if not flat else 0.0
    if not flat:
        return 0.0

    scores = np.array([f[0] for f in flat])
    order = np.argsort(-scores, kind="stable")
    matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(flat))
    for rank, oi in enumerate(order):
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
            tp[rank] = 1.0

    tp_cum = np.cumsum(tp)
    n_fp = len(flat) - int(tp_cum[-1])
    if n_fp == 0:
        # precision is 1 everywhere: the area is exactly the recall reached
        return 100.0 * float(tp_cum[-1]) / n_gt

    recall = tp_cum / n_gt
    precision = tp_cum / np.arange(1, len(flat) + 1)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([1.0], precision))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return 100.0 * float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def map_score(
    gt: list[DetectionSet],
    preds: list[DetectionSet],
    iou_thr: float = 0.5,
) -> float:
    """Mean AP over the classes present in the ground truth.

    With an entirely empty ground truth the score is 100 when the predictions
    are also empty (nothing to find, nothing found) and 0 otherwise.
    """
    if len(gt) != len(preds):
        raise ValueError("gt and preds must cover the same images")
    classes = sorted({d.class_id for dset in gt for d in dset})
    if not classes:
        any_preds = any(len(dset) > 0 for dset in preds)
        return 0.0 if any_preds else 100.0
    aps = []
    for c in classes:
        gt_boxes = [[d.box for d in dset if d.class_id == c] for dset in gt]
        pred_c = [
            [(d.box, d.objectness * d.class_score) for d in dset if d.class_id == c]
            for dset in preds
        ]
        aps.append(average_precision(gt_boxes, pred_c, iou_thr))
    return float(np.mean(aps))


def _final_detect(adapter: DetectorAdapter, images: np.ndarray, cfg: EvalConfig):
    old = (adapter.conf_thresh, adapter.nms_iou)
    adapter.conf_thresh, adapter.nms_iou = cfg.conf_thresh, cfg.nms_iou
    try:
        out = []
        for i in range(0, images.shape[0], _EVAL_BATCH):
            for dset in adapter.detect(images[i : i + _EVAL_BATCH], stage="final"):
                dset.image_index += i
                out.append(dset)
        return out
    finally:
        adapter.conf_thresh, adapter.nms_iou = old


def evaluate_patch(
    patch: AdversarialPatch,
    adapter: DetectorAdapter,
    images: np.ndarray,
    cfg: EvalConfig,
) -> float:
    """mAP of patched images against the adapter's own clean predictions.

    The patch is applied without cutout or pose jitter unless the config
    enables them; those are training-time regularizers.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("need a non-empty (N, S, S, 3) image array")
    adapter.set_shakedrop(False)
    rng = np.random.default_rng(cfg.seed) if (cfg.jitter or cfg.cutout) else None

    gt = _final_detect(adapter, images, cfg)
    patched = np.empty_like(images)
    for i in range(0, images.shape[0], _EVAL_BATCH):
        sl = slice(i, min(i + _EVAL_BATCH, images.shape[0]))
        result = apply_patch(
            images[sl],
            [DetectionSet(g.detections, image_index=k) for k, g in enumerate(gt[sl])],
            patch,
            cfg.patch_scale,
            cfg.target_class,
            jitter=cfg.jitter,
            cutout=cfg.cutout,
            rng=rng,
        )
        patched[sl] = result.images
    preds = _final_detect(adapter, patched, cfg)
    return map_score(gt, preds, cfg.iou_thr)


@dataclass
class TransferCell:
    patch_id: str
    adapter: str
    dataset: str
    map_score: float
    is_white_box: bool


@dataclass
class TransferRow:
    patch_id: str
    is_control: bool
    white_box: str | None
    cells: dict[str, float]
    black_box_avg: float | None


@dataclass
class TransferReport:
    """mAP matrix over (patch, adapter) with white-box markers and the
    black-box average over the remaining columns."""

    rows: list[TransferRow]
    adapters: list[str]
    dataset: str = "dataset"

    def __post_init__(self) -> None:
        for row in self.rows:
            for name, v in row.cells.items():
                if not (0.0 <= v <= 100.0):
                    raise ValueError(f"cell ({row.patch_id}, {name}) = {v} outside [0, 100]")

    def cells(self) -> list[TransferCell]:
        out = []
        for row in self.rows:
            for name, v in row.cells.items():
                out.append(
                    TransferCell(
                        patch_id=row.patch_id,
                        adapter=name,
                        dataset=self.dataset,
                        map_score=v,
                        is_white_box=row.white_box == name,
                    )
                )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["patch_id", "adapter", "dataset", "map", "is_white_box"])
        for cell in self.cells():
            writer.writerow(
                [
                    cell.patch_id,
                    cell.adapter,
                    cell.dataset,
                    f"{cell.map_score:.4f}",
                    str(cell.is_white_box).lower(),
                ]
            )
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "adapters": list(self.adapters),
            "rows": [
                {
                    "patch_id": r.patch_id,
                    "is_control": r.is_control,
                    "white_box": r.white_box,
                    "cells": {k: round(v, 4) for k, v in r.cells.items()},
                    "black_box_avg": None if r.black_box_avg is None else round(r.black_box_avg, 4),
                }
                for r in self.rows
            ],
        }

    def to_text(self) -> str:
        names = list(self.adapters)
        header = ["patch"] + names + ["black-box avg"]
        lines = [header]
        for r in self.rows:
            cells = []
            for n in names:
                v = r.cells.get(n)
                mark = "*" if r.white_box == n else ""
                cells.append("-" if v is None else f"{v:.2f}{mark}")
            avg = "-" if r.black_box_avg is None else f"{r.black_box_avg:.2f}"
            lines.append([r.patch_id] + cells + [avg])
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        out = []
        for row in lines:
            out.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        out.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n(* = white-box column)"


def transfer_matrix(
    patches: list[tuple[str, AdversarialPatch]],
    adapters: list[str | DetectorAdapter],
    images: np.ndarray,
    cfg: EvalConfig,
    dataset_tag: str = "dataset",
) -> TransferReport:
    """Evaluate every (patch, adapter) cell.

    Adversarial rows (patch metadata names the model they were trained on)
    get a white-box marker and a black-box average; control rows get neither.
    Adapter construction failures drop the column with a warning.
    """
    if not patches or not adapters:
        raise ValueError("need at least one patch and one adapter")
    resolved: list[DetectorAdapter] = []
    for a in adapters:
        if isinstance(a, DetectorAdapter):
            resolved.append(a)
            continue
        try:
            resolved.append(create_adapter(a))
        except Exception as exc:  # noqa: BLE001 - column dropped, report still emitted
            warnings.warn(f"dropping adapter column {a!r}: {exc}", RuntimeWarning, stacklevel=2)
    if not resolved:
        raise ValueError("no adapter column could be constructed")

    names = [a.name for a in resolved]
    rows = []
    for patch_id, patch in patches:
        is_control = bool(patch.meta.get("control")) or "trained_on" not in patch.meta
        white = None if is_control else str(patch.meta["trained_on"])
        cells = {}
        for adapter in resolved:
            cells[adapter.name] = evaluate_patch(patch, adapter, images, cfg)
        bb = None
        if white is not None:
            others = [v for n, v in cells.items() if n != white]
            bb = float(np.mean(others)) if others else None
        rows.append(
            TransferRow(
                patch_id=patch_id,
                is_control=is_control,
                white_box=white,
                cells=cells,
                black_box_avg=bb,
            )
        )
    return TransferReport(rows=rows, adapters=names, dataset=dataset_tag)
