"""Detector adapters: uniform interface, registry, and the built-in toy model."""

from __future__ import annotations

from .base import (
    DetectorAdapter,
    RawPrediction,
    create_adapter,
    list_adapters,
    nms,
    register_adapter,
)
from .toy import ToyDetector, fit_toy_detector

__all__ = [
    "DetectorAdapter",
    "RawPrediction",
    "ToyDetector",
    "create_adapter",
    "fit_toy_detector",
    "list_adapters",
    "nms",
    "register_adapter",
]


def _toy_factory(weights: str | None = None, device: str = "cpu") -> ToyDetector:
    if weights:
        return ToyDetector.from_weights(weights, name="toy")
    return ToyDetector(seed=0, name="toy")


def _toy_b_factory(weights: str | None = None, device: str = "cpu") -> ToyDetector:
    if weights:
        return ToyDetector.from_weights(weights, name="toy-b")
    return ToyDetector(seed=1, width=12, name="toy-b")


register_adapter("toy", _toy_factory)
register_adapter("toy-b", _toy_b_factory)
