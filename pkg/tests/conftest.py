"""Shared fixtures: the synthetic shapes corpus and briefly fitted toy
detectors. Fitted weights are cached on disk keyed by the recipe version so
repeated test runs skip the fitting cost."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from blindpatch.config import TrainConfig
from blindpatch.detector.toy import ToyDetector, fit_toy_detector
from blindpatch.ensemble import AugmentationPolicy
from blindpatch.fixtures import make_shapes_dataset

FIXTURE_VERSION = "v1"
CACHE_DIR = Path(__file__).parent / ".fixture_cache"

COLOR_ONLY_POLICY = AugmentationPolicy(
    flip_prob=0.0,
    crop_scale=(1.0, 1.0),
    brightness=0.1,
    contrast=0.1,
    saturation=0.1,
    hue=0.05,
    rotation_deg=0.0,
)

MILD_TRAIN_POLICY = AugmentationPolicy(
    flip_prob=0.5,
    crop_scale=(0.95, 1.0),
    brightness=0.1,
    contrast=0.1,
    saturation=0.1,
    hue=0.05,
    rotation_deg=1.0,
)


def toy_train_config(seed: int = 0, ensemble: bool = False, **overrides) -> TrainConfig:
    """The frozen toy-scale training recipe; ensemble=True enables all three
    self-ensemble strategies on top of the enhanced baseline."""
    kwargs = dict(
        max_epochs=100,
        batch_size=8,
        patch_scale=0.4,
        initial_lr=0.3,
        eps1=2e-3,
        eps2=2e-2,
        lr_decay=0.8,
        attack_method="adam",
        tv_weight=0.1,
        patch_height=64,
        patch_width=64,
        conf_reduction="max_per_image",
        conf_source="obj_times_class",
        use_augmentation=ensemble,
        use_shakedrop=ensemble,
        use_cutout=ensemble,
        use_jitter=False,
        seed=seed,
        shakedrop_prob=0.8,
        shakedrop_range=0.5,
        cutout_prob=0.5,
        cutout_ratio=0.25,
        augmentation=MILD_TRAIN_POLICY,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@pytest.fixture(scope="session")
def shapes48():
    rng = np.random.default_rng(0)
    return make_shapes_dataset(48, 64, rng, two_classes=False)


@pytest.fixture(scope="session")
def shapes_two_class():
    rng = np.random.default_rng(10)
    return make_shapes_dataset(16, 64, rng, two_classes=True)


def _fitted(name: str, seed: int, fit_seed: int, images, annotations) -> ToyDetector:
    CACHE_DIR.mkdir(exist_ok=True)
    cache = CACHE_DIR / f"{name}_{FIXTURE_VERSION}.npz"
    if cache.exists():
        return ToyDetector.from_weights(cache, name=name)
    det = ToyDetector(input_size=64, width=16, seed=seed, name=name)
    fit_toy_detector(
        det,
        images,
        annotations,
        steps=600,
        lr=3e-3,
        rng=np.random.default_rng(fit_seed),
        occlude_prob=0.7,
        flip_prob=0.5,
        color_policy=COLOR_ONLY_POLICY,
    )
    det.save_weights(cache)
    return det


@pytest.fixture(scope="session")
def toy_fitted(shapes48) -> ToyDetector:
    images, anns = shapes48
    return _fitted("toy", 0, 1, images, anns)


@pytest.fixture(scope="session")
def toy_b_fitted(shapes48) -> ToyDetector:
    images, anns = shapes48
    return _fitted("toy-b", 1, 2, images, anns)


@pytest.fixture(scope="session")
def baseline_patch(shapes48, toy_fitted):
    """The seed-0 enhanced-baseline patch, trained once per session."""
    from blindpatch.trainer import new_run, train

    images, _ = shapes48
    run = new_run(toy_train_config(seed=0, ensemble=False), images, toy_fitted)
    patch, history = train(run)
    return patch, history
