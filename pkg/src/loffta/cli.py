"""Command-line entry point exposing the pipeline end-to-end.

Subcommands: extract (synthetic cache), pool, validate, train, eval,
bench train|infer. Exit codes: 0 success, 1 operational error (single-line
diagnostic on stderr), 2 usage error (argparse).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .augment import AugmentationPolicy
from .bench import bench_infer, bench_train
from .errors import LofftaError
from .model import ModelConfig
from .pooling import MODES, pool_cache
from .provider import SyntheticSpec, build_cache
from .store import load_manifest, validate_cache
from .trainer import TrainConfig, evaluate, train


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loffta",
        description="Cache features once, then train a compact classifier "
                    "on the cached tensors.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="write a synthetic feature cache")
    p.add_argument("--provider", choices=["synthetic"], default="synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_positive_int, default=10)
    p.add_argument("--per-class", type=_positive_int, default=100,
                   help="train records per class; val/test get a fifth each")
    p.add_argument("--d", type=_positive_int, default=64)
    p.add_argument("--h", type=_positive_int, default=8)
    p.add_argument("--w", type=_positive_int, default=8)
    p.add_argument("--gamma", type=float, default=3.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pool", help="spatially pool every record of a cache")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="max")
    p.add_argument("--kernel", type=_positive_int, default=2)
    p.add_argument("--stride", type=_positive_int, default=2)

    p = sub.add_parser("validate", help="check manifest/shard consistency")
    p.add_argument("--cache", required=True)

    p = sub.add_parser("train", help="train a classifier on a cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--max-steps", type=_positive_int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--eval-metric", choices=["accuracy", "mean_class_recall"])
    p.add_argument("--embed-dim", type=_positive_int)
    p.add_argument("--depth", type=_positive_int)
    p.add_argument("--heads", type=_positive_int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--cache", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=_positive_int, default=64)

    p = sub.add_parser("bench", help="measure throughput and memory")
    p.add_argument("mode", choices=["train", "infer"])
    p.add_argument("--cache", required=True)
    p.add_argument("--steps", type=_positive_int, default=20)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--checkpoint", help="required for infer mode")
    p.add_argument("--split", default="test")
    p.add_argument("--passes", type=_positive_int, default=1)
    p.add_argument("--embed-dim", type=_positive_int)
    p.add_argument("--depth", type=_positive_int)
    p.add_argument("--heads", type=_positive_int)
    p.add_argument("--json", dest="json_out", help="also write the report here")
    return parser


def _merged_train_config(args) -> tuple[TrainConfig, dict]:
    file_cfg: dict = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
    model_cfg = dict(file_cfg.pop("model", {}))
    overrides = {
        "seed": args.seed, "batch_size": args.batch_size,
        "max_epochs": args.max_epochs, "peak_lr": args.peak_lr,
        "warmup_steps": args.warmup_steps, "weight_decay": args.weight_decay,
        "eval_metric": args.eval_metric,
    }
    for key, value in overrides.items():
        if value is not None:
            file_cfg[key] = value
    for key, flag in (("embed_dim", args.embed_dim), ("depth", args.depth),
                      ("heads", args.heads)):
        if flag is not None:
            model_cfg[key] = flag
    return TrainConfig.from_dict(file_cfg), model_cfg


def _model_config_for(cache_dir, model_overrides: dict) -> ModelConfig | None:
    if not model_overrides:
        return None
    manifest = load_manifest(cache_dir)
    return ModelConfig(feature_dim=manifest.d, grid_h=manifest.h,
                       grid_w=manifest.w, num_classes=manifest.num_classes,
                       **{k: int(v) for k, v in model_overrides.items()})


def _cmd_extract(args) -> int:
    per = args.per_class
    spec = SyntheticSpec(
        classes=args.classes,
        per_class={"train": per, "val": max(1, per // 5),
                   "test": max(1, per // 5)},
        d=args.d, h=args.h, w=args.w, gamma=args.gamma, sigma=args.sigma,
        seed=args.seed)
    manifest = build_cache(spec, args.out)
    print(f"wrote cache {args.out}: splits {manifest.splits}, "
          f"grid {manifest.h}x{manifest.w}x{manifest.d} ({manifest.dtype})")
    return 0


def _cmd_pool(args) -> int:
    manifest = pool_cache(args.in_dir, args.out, args.mode, args.kernel,
                          args.stride)
    print(f"pooled cache {args.out}: grid now {manifest.h}x{manifest.w}, "
          f"mode {args.mode} kernel {args.kernel} stride {args.stride}")
    return 0


def _cmd_validate(args) -> int:
    report = validate_cache(args.cache)
    for line in report.warnings:
        print(f"warning: {line}")
    for line in report.errors:
        print(f"error: {line}")
    if report.errors:
        print(f"error: cache {args.cache} failed validation with "
              f"{len(report.errors)} error(s)", file=sys.stderr)
        return 1
    print(f"ok: cache {args.cache} is consistent")
    return 0


def _cmd_train(args) -> int:
    cfg, model_overrides = _merged_train_config(args)
    model_config = _model_config_for(args.cache, model_overrides)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"train": cfg.to_dict()}
    if model_overrides:
        echo["model"] = model_config.to_dict()
    (out_dir / "config.json").write_text(json.dumps(echo, indent=2))
    result = train(args.cache, cfg, model_config=model_config,
                   out_dir=out_dir, max_steps=args.max_steps)
    print(f"trained {result.steps} steps; best {cfg.eval_metric} "
          f"{result.best_metric:.4f}; checkpoints in {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    metrics = evaluate(args.cache, args.split, args.checkpoint,
                       batch_size=args.batch_size)
    print(json.dumps({"split": args.split, "accuracy": metrics.accuracy,
                      "mean_class_recall": metrics.mean_class_recall,
                      "loss": metrics.loss}))
    return 0


def _cmd_bench(args) -> int:
    model_overrides = {k: v for k, v in (("embed_dim", args.embed_dim),
                                         ("depth", args.depth),
                                         ("heads", args.heads)) if v is not None}
    if args.mode == "train":
        cfg = TrainConfig(batch_size=args.batch_size)
        model_config = _model_config_for(args.cache, model_overrides)
        report = bench_train(args.cache, cfg, args.steps,
                             model_config=model_config)
    else:
        if not args.checkpoint:
            print("error: bench infer needs --checkpoint", file=sys.stderr)
            return 1
        report = bench_infer(args.cache, checkpoint_path=args.checkpoint,
                             batch_size=args.batch_size, split=args.split,
                             passes=args.passes)
    print(report.to_table())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json())
    return 0


_COMMANDS = {
    "extract": _cmd_extract,
    "pool": _cmd_pool,
    "validate": _cmd_validate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (LofftaError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
