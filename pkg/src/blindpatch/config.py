"""Training configuration: every knob of the optimization loop and the
three self-ensemble strategies, with the shipped defaults."""

from __future__ import annotations

import difflib
from dataclasses import asdict, dataclass, field, fields

from .applier import PoseJitter
from .attack import ATTACK_METHODS, CONF_REDUCTIONS, CONF_SOURCES
from .ensemble import AugmentationPolicy
from .errors import ConfigError
from .util import canonical_json, sha256_hex

PATCH_INIT_MODES = ("gray", "random", "white", "from_file")


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    batch_size: int = 8
    patch_scale: float = 0.15
    initial_lr: float = 0.03
    lr_decay: float = 0.5
    eps1: float = 1e-4
    eps2: float = 1e-4
    lr_floor: float = 1e-6
    lr_literal_plateau: bool = False
    tv_weight: float = 2.5

    use_augmentation: bool = True
    use_shakedrop: bool = True
    use_cutout: bool = True
    use_jitter: bool = True

    shakedrop_prob: float = 0.5
    shakedrop_range: float = 1.0
    cutout_prob: float = 0.9
    cutout_ratio: float = 0.4
    cutout_fill: float = 0.5

    attack_method: str = "adam"
    target_class: int = 0
    conf_reduction: str = "mean_all"
    conf_source: str = "objectness"

    patch_height: int = 300
    patch_width: int = 300
    patch_init_mode: str = "random"
    patch_init_source: str | None = None

    sgd_momentum: float = 0.9
    mim_decay: float = 1.0
    pgd_init: float = 0.1

    seed: int = 0
    checkpoint_every: int = 0

    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    jitter: PoseJitter = field(default_factory=PoseJitter)

    def validate(self) -> None:
        probs = {
            "shakedrop_prob": self.shakedrop_prob,
            "cutout_prob": self.cutout_prob,
            "cutout_ratio": self.cutout_ratio,
            "cutout_fill": self.cutout_fill,
        }
        for name, v in probs.items():
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not (0.0 < self.lr_decay < 1.0):
            raise ConfigError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if not (0.0 < self.patch_scale <= 1.0):
            raise ConfigError(f"patch_scale must lie in (0, 1], got {self.patch_scale}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if self.initial_lr <= 0.0:
            raise ConfigError("initial_lr must be > 0")
        if self.tv_weight < 0.0:
            raise ConfigError("tv_weight must be >= 0")
        if self.shakedrop_range < 0.0:
            raise ConfigError("shakedrop_range must be >= 0")
        if self.attack_method not in ATTACK_METHODS:
            raise ConfigError(
                f"attack_method must be one of {ATTACK_METHODS}, got {self.attack_method!r}"
            )
        if self.conf_reduction not in CONF_REDUCTIONS:
            raise ConfigError(
                f"conf_reduction must be one of {CONF_REDUCTIONS}, got {self.conf_reduction!r}"
            )
        if self.conf_source not in CONF_SOURCES:
            raise ConfigError(f"conf_source must be one of {CONF_SOURCES}")
        if self.patch_init_mode not in PATCH_INIT_MODES:
            raise ConfigError(
                f"patch_init_mode must be one of {PATCH_INIT_MODES}, got {self.patch_init_mode!r}"
            )
        if self.patch_height < 1 or self.patch_width < 1:
            raise ConfigError("patch dimensions must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"]["crop_scale"] = list(self.augmentation.crop_scale)
        d["jitter"]["contrast"] = list(self.jitter.contrast)
        return d

    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()).encode())

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """Build a config from a plain mapping; unknown keys are an error
        naming the nearest valid key."""
        data = dict(data)
        kwargs: dict = {}
        valid = {f.name for f in fields(cls)}
        for key, value in data.items():
            if key not in valid:
                hint = difflib.get_close_matches(key, sorted(valid), n=1)
                suffix = f"; did you mean {hint[0]!r}?" if hint else ""
                raise ConfigError(f"unknown config key {key!r}{suffix}")
            kwargs[key] = value
        if "augmentation" in kwargs and isinstance(kwargs["augmentation"], dict):
            aug = dict(kwargs["augmentation"])
            if "crop_scale" in aug:
                aug["crop_scale"] = tuple(aug["crop_scale"])
            try:
                kwargs["augmentation"] = AugmentationPolicy(**aug)
            except TypeError as exc:
                raise ConfigError(f"bad augmentation section: {exc}") from exc
        if "jitter" in kwargs and isinstance(kwargs["jitter"], dict):
            jit = dict(kwargs["jitter"])
            if "contrast" in jit:
                jit["contrast"] = tuple(jit["contrast"])
            try:
                kwargs["jitter"] = PoseJitter(**jit)
            except TypeError as exc:
                raise ConfigError(f"bad jitter section: {exc}") from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg
