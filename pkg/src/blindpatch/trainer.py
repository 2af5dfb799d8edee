"""The end-to-end patch optimization loop with the self-ensemble hooks:
augment, detect clean, paste patch (cutout per placement), detect adversarial
under stochastic residual scaling, loss, update, epoch-level rate schedule."""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import attack as attack_mod
from .applier import apply_patch
from .config import TrainConfig
from .core import AdversarialPatch, EpochRecord, TrainHistory
from .detector.base import DetectorAdapter
from .ensemble import CutoutSpec, augment
from .errors import ConfigError, IntegrityError
from .util import atomic_write_bytes

SNAPSHOT_FORMAT = "blindpatch-snapshot-1"

BatchListener = Callable[[int, int, dict], None]


@dataclass
class TrainRun:
    """Everything one training run owns: config, data, adapter, and state."""

    config: TrainConfig
    images: np.ndarray
    adapter: DetectorAdapter
    rng: np.random.Generator
    working_patch: np.ndarray  # float64 view the optimizer updates
    attack_state: attack_mod.AttackState
    scheduler: attack_mod.SchedulerState
    history: TrainHistory = field(default_factory=TrainHistory)
    epoch: int = 0
    skipped_batches: int = 0
    init_meta: dict = field(default_factory=dict)

    def snapshot_patch(self) -> AdversarialPatch:
        """Current patch as a clamped float32 value object with provenance."""
        px = np.clip(self.working_patch, 0.0, 1.0).astype(np.float32)
        meta = dict(self.init_meta)
        meta.update(
            {
                "config_digest": self.config.digest(),
                "trained_on": self.adapter.name,
                "epoch": self.epoch,
            }
        )
        return AdversarialPatch(px, meta=meta)


def new_run(config: TrainConfig, images: np.ndarray, adapter: DetectorAdapter) -> TrainRun:
    """Validate inputs and set up patch, optimizer, scheduler, and rng."""
    config.validate()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigError("dataset must be a non-empty (N, S, S, 3) array")
    if images.shape[1] != adapter.input_size or images.shape[3] != 3:
        raise ConfigError(
            f"dataset images {images.shape[1:]} do not match adapter input "
            f"({adapter.input_size}, {adapter.input_size}, 3)"
        )
    rng = np.random.default_rng(config.seed)
    from .core import patch_init

    patch = patch_init(
        config.patch_height,
        config.patch_width,
        config.patch_init_mode,
        source=config.patch_init_source,
        rng=rng,
    )
    state = attack_mod.init_attack_state(
        config.attack_method,
        config.initial_lr,
        patch.pixels.shape,
        sgd_momentum=config.sgd_momentum,
        mim_decay=config.mim_decay,
        pgd_init=config.pgd_init,
    )
    sched = attack_mod.SchedulerState(
        lr=config.initial_lr,
        decay=config.lr_decay,
        eps_abs=config.eps1,
        eps_rel=config.eps2,
        floor=config.lr_floor,
        literal=config.lr_literal_plateau,
    )
    return TrainRun(
        config=config,
        images=images,
        adapter=adapter,
        rng=rng,
        working_patch=patch.pixels.astype(np.float64),
        attack_state=state,
        scheduler=sched,
        init_meta={"init_mode": config.patch_init_mode},
    )


def _batches(n: int, bs: int) -> list[np.ndarray]:
    # partial final batch is processed rather than dropped
    return [np.arange(i, min(i + bs, n)) for i in range(0, n, bs)]


def train(
    run: TrainRun,
    checkpoint_path: str | Path | None = None,
    batch_listener: BatchListener | None = None,
) -> tuple[AdversarialPatch, TrainHistory]:
    """Run the remaining epochs of the loop; resumable via checkpoints."""
    cfg = run.config
    cutout = (
        CutoutSpec(cfg.cutout_prob, cfg.cutout_ratio, cfg.cutout_fill) if cfg.use_cutout else None
    )
    jitter = cfg.jitter if cfg.use_jitter else None
    batches = _batches(run.images.shape[0], cfg.batch_size)

    while run.epoch < cfg.max_epochs:
        epoch_start = time.perf_counter()
        det_losses: list[float] = []
        tv_vals: list[float] = []
        epoch_skipped = 0

        for bi, idx in enumerate(batches):
            if cfg.use_augmentation:
                batch = np.stack(
                    [augment(run.images[i], cfg.augmentation, run.rng) for i in idx]
                )
            else:
                batch = run.images[idx]

            # pseudo-labels come from the plain model: branch scaling stays off
            run.adapter.set_shakedrop(False)
            clean = run.adapter.detect(batch, stage="final")

            result = apply_patch(
                batch,
                clean,
                run.working_patch,
                cfg.patch_scale,
                cfg.target_class,
                jitter=jitter,
                cutout=cutout,
                rng=run.rng,
            )

            skipped = result.n_placements == 0
            loss = None
            if not skipped:
                if cfg.use_shakedrop:
                    run.adapter.set_shakedrop(
                        True, cfg.shakedrop_prob, cfg.shakedrop_range, rng=run.rng
                    )
                raw = run.adapter.detect_raw(result.images)
                loss = attack_mod.detection_loss(
                    raw, cfg.target_class, cfg.conf_reduction, cfg.conf_source
                )
                if loss.no_signal:
                    skipped = True
                else:
                    tv_val, tv_grad = attack_mod.tv_loss_grad(run.working_patch)
                    d_images = raw.backward(loss.d_obj, loss.d_cls)
                    grad = result.grad_to_patch(d_images) + cfg.tv_weight * tv_grad
                    run.attack_state.lr = run.scheduler.lr
                    run.working_patch = attack_mod.attack_step(
                        run.working_patch, grad, run.attack_state, rng=run.rng
                    )
                    det_losses.append(loss.value)
                    tv_vals.append(tv_val)
                run.adapter.set_shakedrop(False)

            if skipped:
                epoch_skipped += 1
                run.skipped_batches += 1
            if batch_listener is not None:
                batch_listener(
                    run.epoch,
                    bi,
                    {
                        "clean": clean,
                        "skipped": skipped,
                        "det_loss": None if loss is None else loss.value,
                        "placements": result.n_placements,
                    },
                )

        mean_det = float(np.mean(det_losses)) if det_losses else 0.0
        mean_tv = float(np.mean(tv_vals)) if tv_vals else 0.0
        attack_mod.scheduler_update(run.scheduler, mean_det)
        run.epoch += 1
        run.history.append(
            EpochRecord(
                epoch=run.epoch,
                det_loss=mean_det,
                tv_loss=mean_tv,
                lr=run.scheduler.lr,
                wall_time=time.perf_counter() - epoch_start,
                skipped_batches=epoch_skipped,
            )
        )
        if (
            checkpoint_path is not None
            and cfg.checkpoint_every > 0
            and run.epoch % cfg.checkpoint_every == 0
            and run.epoch < cfg.max_epochs
        ):
            checkpoint(run, checkpoint_path)

    if checkpoint_path is not None:
        checkpoint(run, checkpoint_path)
    return run.snapshot_patch(), run.history


def checkpoint(run: TrainRun, path: str | Path) -> None:
    """Freeze the run into a single resumable archive (write-then-rename)."""
    state = run.attack_state
    meta = {
        "format": SNAPSHOT_FORMAT,
        "config": run.config.to_dict(),
        "config_digest": run.config.digest(),
        "epoch": run.epoch,
        "skipped_batches": run.skipped_batches,
        "rng_state": run.rng.bit_generator.state,
        "scheduler": {
            "lr": run.scheduler.lr,
            "prev_loss": run.scheduler.prev_loss,
        },
        "attack": {
            "method": state.method,
            "lr": state.lr,
            "step_count": state.step_count,
            "skipped_nonfinite": state.skipped_nonfinite,
        },
        "history": run.history.to_dicts(),
        "patch_digest": run.snapshot_patch().digest(),
    }
    arrays = {"patch": run.working_patch}
    if state.m is not None:
        arrays["attack_m"] = state.m
    if state.v is not None:
        arrays["attack_v"] = state.v
    buf = io.BytesIO()
    np.savez(buf, __meta__=json.dumps(meta), **arrays)
    atomic_write_bytes(path, buf.getvalue())


def resume(
    path: str | Path,
    images: np.ndarray,
    adapter: DetectorAdapter,
    config: TrainConfig | None = None,
) -> TrainRun:
    """Rebuild a run from a snapshot; continues bit-identically.

    When a config is passed it must hash to the digest stored in the
    snapshot; otherwise the embedded config is used.
    """
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"no snapshot at {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(data["__meta__"].item())
            patch = np.ascontiguousarray(data["patch"], dtype=np.float64)
            attack_m = data["attack_m"].copy() if "attack_m" in data else None
            attack_v = data["attack_v"].copy() if "attack_v" in data else None
    except (ValueError, KeyError, OSError) as exc:
        raise IntegrityError(f"corrupt snapshot {path}: {exc}") from exc
    if meta.get("format") != SNAPSHOT_FORMAT:
        raise IntegrityError(f"{path} is not a {SNAPSHOT_FORMAT} archive")

    snap_cfg = TrainConfig.from_dict(meta["config"])
    if config is not None and config.digest() != meta["config_digest"]:
        raise ConfigError(
            "refusing to resume: supplied config digest "
            f"{config.digest()[:12]} does not match snapshot {meta['config_digest'][:12]}"
        )
    cfg = config if config is not None else snap_cfg

    run = new_run(cfg, images, adapter)
    run.working_patch = patch
    run.epoch = int(meta["epoch"])
    run.skipped_batches = int(meta["skipped_batches"])
    run.rng.bit_generator.state = meta["rng_state"]
    run.scheduler.lr = float(meta["scheduler"]["lr"])
    prev = meta["scheduler"]["prev_loss"]
    run.scheduler.prev_loss = None if prev is None else float(prev)
    st = run.attack_state
    st.lr = float(meta["attack"]["lr"])
    st.step_count = int(meta["attack"]["step_count"])
    st.skipped_nonfinite = int(meta["attack"]["skipped_nonfinite"])
    if attack_m is not None:
        st.m = attack_m
    if attack_v is not None:
        st.v = attack_v
    run.history = TrainHistory.from_dicts(meta["history"])
    return run
