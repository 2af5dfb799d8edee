"""Uniform detector interface, adapter registry, and final-stage suppression."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..core import BoundingBox, Detection, DetectionSet
from ..errors import AdapterNotFoundError, RegistrationError


@dataclass
class RawPrediction:
    """Raw candidate grid of one forward pass, with a hook to push gradients
    on the confidences back to the input pixels."""

    boxes: np.ndarray  # (B, N, 4) normalized xyxy
    objectness: np.ndarray  # (B, N), each in (0, 1)
    class_probs: np.ndarray  # (B, N, K)
    backward_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def backward(self, d_obj: np.ndarray, d_cls: np.ndarray) -> np.ndarray:
        if self.backward_fn is None:
            raise RuntimeError("this raw prediction does not carry a backward hook")
        return self.backward_fn(d_obj, d_cls)

    def detection_sets(self, floor: float = 0.0) -> list[DetectionSet]:
        out = []
        cls_ids = self.class_probs.argmax(axis=2)
        for b in range(self.boxes.shape[0]):
            dets = []
            for n in range(self.boxes.shape[1]):
                obj = float(self.objectness[b, n])
                if obj < floor:
                    continue
                cid = int(cls_ids[b, n])
                x1, y1, x2, y2 = self.boxes[b, n]
                dets.append(
                    Detection(
                        box=BoundingBox(float(x1), float(y1), float(x2), float(y2)),
                        objectness=obj,
                        class_id=cid,
                        class_score=float(self.class_probs[b, n, cid]),
                    )
                )
            out.append(DetectionSet(dets, image_index=b, raw_candidates=True))
        return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, best first."""
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep: list[int] = []
    alive = np.ones(len(order), dtype=bool)
    for ii, i in enumerate(order):
        if not alive[ii]:
            continue
        keep.append(int(i))
        rest = order[ii + 1 :]
        mask = alive[ii + 1 :]
        if rest.size == 0:
            break
        ix = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        iy = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = ix * iy
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0.0, inter / union, 0.0)
        alive[ii + 1 :] = mask & (iou <= iou_thr)
    return keep


class DetectorAdapter:
    """Base class for attacked models: batched images in, detections out.

    Subclasses implement :meth:`forward_raw`; this class provides stage
    handling, confidence thresholding, and per-class NMS.
    """

    name: str = "adapter"
    input_size: int = 416
    class_names: Sequence[str] = ()

    conf_thresh: float = 0.25
    nms_iou: float = 0.45
    candidate_floor: float = 0.0

    @property
    def residual_blocks(self) -> Sequence[str]:
        """Ordered handles of blocks that support stochastic branch scaling."""
        return ()

    def forward_raw(self, images: np.ndarray) -> RawPrediction:
        raise NotImplementedError

    def set_shakedrop(
        self,
        enabled: bool,
        prob: float = 0.5,
        spread: float = 1.0,
        rng: np.random.Generator | None = None,
    ) -> None:
        if enabled and not self.residual_blocks:
            warnings.warn(
                f"adapter {self.name!r} has no residual blocks; "
                "proceeding without model self-ensemble",
                RuntimeWarning,
                stacklevel=2,
            )
        # adapters without blocks simply never consult these
        self._shakedrop_enabled = bool(enabled)
        self._shakedrop_prob = float(prob)
        self._shakedrop_spread = float(spread)
        if rng is not None:
            self._shakedrop_rng = rng

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        s = self.input_size
        if arr.ndim != 4 or arr.shape[1] != s or arr.shape[2] != s or arr.shape[3] != 3:
            raise ValueError(
                f"expected images of shape (B, {s}, {s}, 3) for adapter {self.name!r}, "
                f"got {np.asarray(images).shape}"
            )
        return arr

    def detect(self, images: np.ndarray, stage: str = "final") -> list[DetectionSet]:
        """Run the model; 'raw' keeps every candidate above the floor,
        'final' applies the confidence threshold and per-class NMS."""
        arr = self._check_images(images)
        raw = self.forward_raw(arr)
        if stage == "raw":
            return raw.detection_sets(floor=self.candidate_floor)
        if stage != "final":
            raise ValueError(f"unknown stage {stage!r}, expected 'raw' or 'final'")

        out = []
        cls_ids = raw.class_probs.argmax(axis=2)
        for b in range(arr.shape[0]):
            obj = raw.objectness[b]
            cid = cls_ids[b]
            score = obj * raw.class_probs[b, np.arange(obj.shape[0]), cid]
            keep = score >= self.conf_thresh
            dets: list[Detection] = []
            for c in np.unique(cid[keep]):
                sel = np.where(keep & (cid == c))[0]
                kept = nms(raw.boxes[b, sel], score[sel], self.nms_iou)
                for k in kept:
                    n = sel[k]
                    x1, y1, x2, y2 = raw.boxes[b, n]
                    dets.append(
                        Detection(
                            box=BoundingBox(float(x1), float(y1), float(x2), float(y2)),
                            objectness=float(obj[n]),
                            class_id=int(c),
                            class_score=float(raw.class_probs[b, n, c]),
                        )
                    )
            dets.sort(key=lambda d: d.objectness * d.class_score, reverse=True)
            out.append(DetectionSet(dets, image_index=b, raw_candidates=False))
        return out

    def detect_raw(self, images: np.ndarray) -> RawPrediction:
        """Raw forward pass with gradient hook; used by the training loop."""
        return self.forward_raw(self._check_images(images))


_REGISTRY: dict[str, Callable[..., DetectorAdapter]] = {}


def register_adapter(name: str, factory: Callable[..., DetectorAdapter]) -> None:
    """Register a named adapter factory taking (weights, device) keywords."""
    if name in _REGISTRY:
        raise RegistrationError(f"adapter {name!r} is already registered")
    _REGISTRY[name] = factory


def list_adapters() -> list[str]:
    return sorted(_REGISTRY)


def create_adapter(name: str, weights: str | None = None, device: str = "cpu") -> DetectorAdapter:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise AdapterNotFoundError(
            f"unknown adapter {name!r}; available: {', '.join(list_adapters()) or '(none)'}"
        ) from None
    return factory(weights=weights, device=device)
