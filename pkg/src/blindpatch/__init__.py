"""Universal adversarial patches against object detectors: an optimization
loop with data/model/patch self-ensembling, plus mAP transfer evaluation."""

from ._kernels import backend as kernel_backend
from .applier import ApplyResult, Placement, PoseJitter, apply_patch, compute_placement
from .attack import (
    AttackState,
    LossResult,
    SchedulerState,
    attack_step,
    detection_loss,
    init_attack_state,
    scheduler_update,
    total_loss,
    tv_loss,
    tv_loss_grad,
)
from .config import TrainConfig
from .core import (
    AdversarialPatch,
    BoundingBox,
    Detection,
    DetectionSet,
    EpochRecord,
    TrainHistory,
    load_patch,
    patch_init,
    save_patch,
)
from .dataset import ImageDataset, letterbox
from .detector import (
    DetectorAdapter,
    RawPrediction,
    ToyDetector,
    create_adapter,
    fit_toy_detector,
    list_adapters,
    register_adapter,
)
from .ensemble import (
    AugmentationPolicy,
    CutoutSpec,
    ShakeDropSample,
    augment,
    cutout,
    maybe_cutout,
    sample_shakedrop,
    shakedrop_backward,
    shakedrop_forward,
)
from .errors import (
    AdapterNotFoundError,
    BlindpatchError,
    ConfigError,
    IntegrityError,
    PatchLoadError,
    RegistrationError,
)
from .evaluation import (
    EvalConfig,
    TransferReport,
    average_precision,
    evaluate_patch,
    map_score,
    transfer_matrix,
)
from .trainer import TrainRun, checkpoint, new_run, resume, train

__version__ = "0.1.0"

__all__ = [
    "AdapterNotFoundError",
    "AdversarialPatch",
    "ApplyResult",
    "AttackState",
    "AugmentationPolicy",
    "BlindpatchError",
    "BoundingBox",
    "ConfigError",
    "CutoutSpec",
    "Detection",
    "DetectionSet",
    "DetectorAdapter",
    "EpochRecord",
    "EvalConfig",
    "ImageDataset",
    "IntegrityError",
    "LossResult",
    "PatchLoadError",
    "Placement",
    "PoseJitter",
    "RawPrediction",
    "RegistrationError",
    "SchedulerState",
    "ShakeDropSample",
    "ToyDetector",
    "TrainConfig",
    "TrainHistory",
    "TrainRun",
    "TransferReport",
    "apply_patch",
    "attack_step",
    "augment",
    "average_precision",
    "checkpoint",
    "compute_placement",
    "create_adapter",
    "cutout",
    "detection_loss",
    "evaluate_patch",
    "fit_toy_detector",
    "init_attack_state",
    "kernel_backend",
    "letterbox",
    "list_adapters",
    "load_patch",
    "map_score",
    "maybe_cutout",
    "new_run",
    "patch_init",
    "register_adapter",
    "resume",
    "sample_shakedrop",
    "save_patch",
    "scheduler_update",
    "shakedrop_backward",
    "shakedrop_forward",
    "total_loss",
    "train",
    "transfer_matrix",
    "tv_loss",
    "tv_loss_grad",
]
