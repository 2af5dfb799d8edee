"""Command-line surface: train, evaluate, apply.

Config resolution order is built-in defaults < YAML config file < --set
overrides; every command writes a manifest of the fully resolved run before
any long-running work starts.
"""

from __future__ import annotations

import argparse
import difflib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import TrainConfig
from .core import AdversarialPatch, load_patch, patch_init, save_patch
from .dataset import ImageDataset
from .detector import create_adapter, list_adapters
from .errors import BlindpatchError, ConfigError
from .evaluation import EvalConfig, evaluate_patch, transfer_matrix
from .trainer import new_run, resume, train
from .util import atomic_write_text, canonical_json

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_RUN_KEYS = ("adapter", "weights", "dataset", "out")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    import yaml

    data = yaml.safe_load(p.read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must contain a mapping at the top level")
    return data


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def _apply_overrides(data: dict, overrides: list[str]) -> dict:
    out = dict(data)
    for item in overrides:
        key, value = _parse_override(item)
        cursor = out
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = cursor.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                cursor[part] = nxt
            cursor = nxt
        cursor[parts[-1]] = value
    return out


def _split_run_keys(data: dict) -> tuple[dict, dict]:
    run = {k: data.pop(k) for k in list(data) if k in _RUN_KEYS}
    return run, data


def _resolve_train_config(data: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write_manifest(out: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["tool_version"] = __version__
    payload["created"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    atomic_write_text(out / "manifest.json", canonical_json(payload))


def _load_plugins() -> None:
    import importlib.util
    import os

    search = os.environ.get("BLINDPATCH_ADAPTER_PATH", "")
    for entry in filter(None, search.split(":")):
        for path in sorted(Path(entry).glob("*.py")):
            spec = importlib.util.spec_from_file_location(f"blindpatch_plugin_{path.stem}", path)
            if spec and spec.loader:
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    merged = _apply_overrides(file_cfg, args.set or [])
    if args.seed is not None:
        merged["seed"] = args.seed
    run_keys, train_keys = _split_run_keys(merged)
    adapter_name = args.adapter or run_keys.get("adapter")
    dataset_path = args.dataset or run_keys.get("dataset")
    out_dir = Path(args.out or run_keys.get("out") or "runs/train")
    if adapter_name is None or dataset_path is None:
        raise ConfigError("train needs an adapter and a dataset (flags or config keys)")
    cfg = _resolve_train_config(train_keys)

    adapter = create_adapter(adapter_name, weights=run_keys.get("weights") or args.weights)
    dataset = ImageDataset(dataset_path)
    images, skipped = dataset.load_all(adapter.input_size)

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        out_dir,
        {
            "command": "train",
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            "adapter": adapter_name,
            "dataset": {
                "root": str(dataset.root),
                "images": len(dataset),
                "decode_skipped": [str(p) for p in skipped],
            },
            "seed": cfg.seed,
            "out": str(out_dir),
        },
    )

    snapshot = out_dir / "checkpoint.npz"
    if args.resume:
        run = resume(args.resume, images, adapter, config=cfg)
    else:
        run = new_run(cfg, images, adapter)
    patch, history = train(run, checkpoint_path=snapshot)

    paths = save_patch(patch, out_dir / "patch")
    atomic_write_text(out_dir / "history.json", json.dumps(history.to_dicts(), indent=2))
    print(f"trained {cfg.max_epochs} epochs; patch digest {patch.digest()[:12]}")
    for kind, p in paths.items():
        print(f"  {kind}: {p}")
    return EXIT_OK


def _control_patches(height: int, width: int, seed: int) -> list[tuple[str, AdversarialPatch]]:
    rng = np.random.default_rng(seed)
    out = []
    for mode in ("gray", "random", "white"):
        patch = patch_init(height, width, mode, rng=rng)
        patch.meta["control"] = mode
        out.append((mode, patch))
    return out


def cmd_evaluate(args: argparse.Namespace) -> int:
    if not args.patches:
        raise ConfigError("evaluate needs at least one patch path")
    adapters = [a for a in (args.adapters or "").split(",") if a]
    if not adapters:
        raise ConfigError(f"evaluate needs --adapters; registered: {', '.join(list_adapters())}")
    if not args.dataset:
        raise ConfigError("evaluate needs --dataset")

    patches: list[tuple[str, AdversarialPatch]] = []
    for p in args.patches:
        try:
            patch = load_patch(p)
        except BlindpatchError as exc:
            raise ConfigError(f"cannot load patch {p}: {exc}") from exc
        patches.append((Path(p).stem, patch))
    cfg = EvalConfig(
        iou_thr=args.iou_thr,
        conf_thresh=args.conf_thresh,
        nms_iou=args.nms_iou,
        patch_scale=args.scale,
        target_class=args.target_class,
        seed=args.seed or 0,
    )
    if args.controls:
        first = patches[0][1]
        patches.extend(_control_patches(first.height, first.width, cfg.seed))

    out_dir = Path(args.out or "runs/evaluate")
    out_dir.mkdir(parents=True, exist_ok=True)

    resolved = []
    weights = [w for w in (args.weights or "").split(",")]
    for i, name in enumerate(adapters):
        w = weights[i] if i < len(weights) and weights[i] else None
        resolved.append(create_adapter(name, weights=w))
    dataset = ImageDataset(args.dataset)
    images, skipped = dataset.load_all(resolved[0].input_size)

    _write_manifest(
        out_dir,
        {
            "command": "evaluate",
            "patches": [str(p) for p in args.patches],
            "controls": bool(args.controls),
            "adapters": adapters,
            "dataset": {
                "root": str(dataset.root),
                "images": len(dataset),
                "decode_skipped": [str(p) for p in skipped],
            },
            "eval": {
                "iou_thr": cfg.iou_thr,
                "conf_thresh": cfg.conf_thresh,
                "nms_iou": cfg.nms_iou,
                "patch_scale": cfg.patch_scale,
                "target_class": cfg.target_class,
            },
            "seed": cfg.seed,
            "out": str(out_dir),
        },
    )

    report = transfer_matrix(patches, resolved, images, cfg, dataset_tag=str(dataset.root))
    atomic_write_text(out_dir / "report.csv", report.to_csv())
    atomic_write_text(out_dir / "report.json", canonical_json(report.to_dict()))
    _plot_report(report, out_dir / "report.png")
    print(report.to_text())
    print(f"report files under {out_dir}")
    return EXIT_OK


def _plot_report(report, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = report.adapters
    x = np.arange(len(names))
    width = 0.8 / max(len(report.rows), 1)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(names) * max(len(report.rows), 1) / 2, 4))
    for i, row in enumerate(report.rows):
        vals = [row.cells.get(n, float("nan")) for n in names]
        ax.bar(x + i * width, vals, width, label=row.patch_id)
    ax.set_xticks(x + width * (len(report.rows) - 1) / 2)
    ax.set_xticklabels(names)
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.set_title("per-adapter mAP (lower = stronger attack)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_apply(args: argparse.Namespace) -> int:
    from PIL import Image

    from .applier import apply_patch

    patch = load_patch(args.patch)
    adapter = create_adapter(args.adapter, weights=args.weights)
    src = Path(args.images)
    paths = [src] if src.is_file() else sorted(
        p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    if not paths:
        raise ConfigError(f"no images at {src}")
    out_dir = Path(args.out or "runs/apply")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        out_dir,
        {
            "command": "apply",
            "patch": str(args.patch),
            "adapter": args.adapter,
            "images": [str(p) for p in paths],
            "scale": args.scale,
            "target_class": args.target_class,
            "seed": args.seed or 0,
            "out": str(out_dir),
        },
    )

    from .dataset import letterbox

    records = []
    for p in paths:
        try:
            with Image.open(p) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        except Exception as exc:  # noqa: BLE001 - per-file skip contract
            records.append({"image": str(p), "error": str(exc)})
            continue
        boxed = letterbox(arr, adapter.input_size)[None]
        clean = adapter.detect(boxed, stage="final")
        result = apply_patch(
            boxed, clean, patch, args.scale, args.target_class, rng=None
        )
        patched_dets = adapter.detect(result.images, stage="final")
        for suffix, image in (("clean", boxed[0]), ("patched", result.images[0])):
            out_img = Image.fromarray(np.round(image * 255.0).astype(np.uint8), mode="RGB")
            out_img.save(out_dir / f"{p.stem}_{suffix}.png")
        records.append(
            {
                "image": str(p),
                "clean_detections": len(clean[0]),
                "patched_detections": len(patched_dets[0]),
                "placements": result.n_placements,
            }
        )
        print(
            f"{p.name}: {len(clean[0])} clean -> {len(patched_dets[0])} patched "
            f"({result.n_placements} placements)"
        )
    atomic_write_text(out_dir / "summary.json", json.dumps(records, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blindpatch",
        description="optimize and evaluate universal adversarial patches against object detectors",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="optimize a patch against one adapter")
    p_train.add_argument("--config", help="YAML config file")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p_train.add_argument("--adapter", help="adapter name (see --list-adapters)")
    p_train.add_argument("--weights", help="adapter weights path")
    p_train.add_argument("--dataset", help="directory of training images")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out", help="artifact output directory")
    p_train.add_argument("--resume", help="resume from a checkpoint archive")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="mAP transfer matrix over patches x adapters")
    p_eval.add_argument("patches", nargs="*", help="patch files (.patch/.png)")
    p_eval.add_argument("--adapters", help="comma-separated adapter names")
    p_eval.add_argument("--weights", help="comma-separated adapter weights paths")
    p_eval.add_argument("--dataset", required=False)
    p_eval.add_argument("--controls", action="store_true", help="add gray/random/white rows")
    p_eval.add_argument("--iou-thr", type=float, default=0.5, dest="iou_thr")
    p_eval.add_argument("--conf-thresh", type=float, default=0.25, dest="conf_thresh")
    p_eval.add_argument("--nms-iou", type=float, default=0.45, dest="nms_iou")
    p_eval.add_argument("--scale", type=float, default=0.15)
    p_eval.add_argument("--target-class", type=int, default=0, dest="target_class")
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_evaluate)

    p_apply = sub.add_parser("apply", help="paste a patch onto images and count detections")
    p_apply.add_argument("patch")
    p_apply.add_argument("images", help="image file or directory")
    p_apply.add_argument("--adapter", required=True)
    p_apply.add_argument("--weights")
    p_apply.add_argument("--scale", type=float, default=0.15)
    p_apply.add_argument("--target-class", type=int, default=0, dest="target_class")
    p_apply.add_argument("--seed", type=int)
    p_apply.add_argument("--out")
    p_apply.set_defaults(func=cmd_apply)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _load_plugins()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BlindpatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
