"""Run a frozen backbone over an image folder and write a feature cache.

Step one of the cache-then-train workflow: each image is preprocessed,
pushed through the model once in inference mode, and its CLS vector plus
spatially arranged patch tokens are appended to binary shards that the
trainer consumes as-is. Optional spatial pooling shrinks grids before they
are stored. The model never appears again after this step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import GridAmbiguity, InvalidValue
from .images import load_image_tensor, scan_class_folders
from .shards import write_manifest, write_shard, shard_path
from .vit import load_model

log = logging.getLogger(__name__)

SPLIT_ORDER = ("train", "val")


def grid_shape(token_count: int,
               override: tuple[int, int] | None = None) -> tuple[int, int]:
    """Spatial layout of a token sequence, square unless overridden."""
    if override is not None:
        h, w = int(override[0]), int(override[1])
        if h < 1 or w < 1 or h * w != token_count:
            raise InvalidValue(
                f"grid override {h}x{w} does not cover {token_count} tokens")
        return h, w
    side = math.isqrt(token_count)
    if side * side != token_count:
        raise GridAmbiguity(
            f"{token_count} tokens have no square layout; pass an explicit "
            f"(h, w)")
    return side, side


def pool_grid(grid: np.ndarray, mode: str, kernel: int,
              stride: int) -> np.ndarray:
    """Windowed max/average over the two spatial axes."""
    h, w, d = grid.shape
    if mode not in ("max", "average"):
        raise InvalidValue(f"pool mode must be max or average, got {mode!r}")
    if kernel < 1 or stride < 1 or kernel > min(h, w):
        raise InvalidValue(
            f"pool kernel {kernel} / stride {stride} invalid for {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    out = np.empty((oh, ow, d), dtype=grid.dtype)
    for i in range(oh):
        for j in range(ow):
            win = grid[i * stride:i * stride + kernel,
                       j * stride:j * stride + kernel].reshape(-1, d)
            out[i, j] = win.max(axis=0) if mode == "max" else win.mean(axis=0)
    return out


@dataclass
class ExtractResult:
    manifest: dict
    counts: dict[str, int]
    skipped: list[tuple[str, str]] = field(default_factory=list)
    out_root: Path | None = None


def _val_period(val_fraction: float) -> int:
    if not 0.0 <= val_fraction < 1.0:
        raise InvalidValue(
            f"val_fraction must be in [0, 1), got {val_fraction}")
    return 0 if val_fraction == 0.0 else max(2, round(1.0 / val_fraction))


def extract_images(model_id: str, image_dir, image_size: int, out_root,
                   dtype: str = "f32", pool: dict | None = None,
                   weights: str | None = None, val_fraction: float = 0.1,
                   seed: int = 0, batch_size: int = 8,
                   grid_hw: tuple[int, int] | None = None) -> ExtractResult:
    """Extract features for every readable image under image_dir.

    Images live in one subfolder per class. Every Nth image of a class
    (N from val_fraction) goes to the val split so the cache is trainable
    without further plumbing; unreadable files are skipped with a warning
    and listed in the result.
    """
    if pool is not None:
        extra = set(pool) - {"mode", "kernel", "stride"}
        if extra:
            raise InvalidValue(f"unknown pool keys {sorted(extra)}")
    period = _val_period(val_fraction)

    model, spec, param_count, note = load_model(model_id, image_size,
                                                weights=weights, seed=seed)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    class_names, jobs = scan_class_folders(image_dir)

    # load, skipping what cannot be decoded; split assignment counts only
    # readable images so the ratio holds under corruption
    skipped: list[tuple[str, str]] = []
    batch_jobs: list[tuple[str, int, torch.Tensor]] = []
    seen_per_class: dict[int, int] = {}
    for label, path in jobs:
        try:
            tensor = load_image_tensor(path, image_size, spec.mean, spec.std)
        except OSError as e:
            log.warning("skipping unreadable image %s: %s", path, e)
            skipped.append((str(path), str(e)))
            continue
        j = seen_per_class.get(label, 0)
        seen_per_class[label] = j + 1
        split = "val" if period and (j % period == period - 1) else "train"
        batch_jobs.append((split, label, tensor))
    if not any(s == "train" for s, _, _ in batch_jobs):
        raise InvalidValue(f"no readable images under {image_dir}")
    if period and not any(s == "val" for s, _, _ in batch_jobs):
        log.warning(
            "val fraction %.3g produced no val records; classes need at "
            "least %d images each (or raise the fraction)",
            val_fraction, period)

    records: dict[str, list] = {s: [] for s in SPLIT_ORDER}
    h = w = None
    with torch.inference_mode():
        for i in range(0, len(batch_jobs), batch_size):
            chunk = batch_jobs[i:i + batch_size]
            x = torch.stack([t for _, _, t in chunk])
            cls_b, tok_b, _ = model.forward_features(x)
            if h is None:
                h, w = grid_shape(int(tok_b.shape[1]), grid_hw)
            cls_np = cls_b.numpy().astype(np.float32)
            tok_np = tok_b.numpy().astype(np.float32)
            for n, (split, label, _) in enumerate(chunk):
                grid = tok_np[n].reshape(h, w, spec.embed_dim)
                if pool is not None:
                    grid = pool_grid(grid, pool["mode"], int(pool["kernel"]),
                                     int(pool["stride"]))
                records[split].append((label, cls_np[n], grid))

    out_h, out_w = records["train"][0][2].shape[:2]
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    counts: dict[str, int] = {}
    for split in SPLIT_ORDER:
        if records[split]:
            write_shard(shard_path(out_root, split, 0), records[split],
                        spec.embed_dim, out_h, out_w, dtype)
            counts[split] = len(records[split])

    # per-channel stats over train grid cells, same convention the
    # synthetic provider uses
    cells = np.concatenate(
        [g.reshape(-1, spec.embed_dim) for _, _, g in records["train"]])
    normalization = {"mean": cells.mean(axis=0, dtype=np.float64).tolist(),
                     "std": cells.std(axis=0, dtype=np.float64).tolist()}

    manifest = {
        "format_version": 1,
        "dataset_name": Path(image_dir).name,
        "class_names": class_names,
        "provider": {
            "name": model_id,
            "param_count": param_count,
            "patch_size": spec.patch_size,
            "source_image_size": image_size,
        },
        "d": spec.embed_dim,
        "h": out_h,
        "w": out_w,
        "dtype": dtype,
        "splits": counts,
        "normalization": normalization,
        "note": note,
    }
    if pool is not None:
        manifest["pooling"] = {"mode": pool["mode"],
                               "kernel": int(pool["kernel"]),
                               "stride": int(pool["stride"])}
    write_manifest(out_root, manifest)
    return ExtractResult(manifest=manifest, counts=counts, skipped=skipped,
                         out_root=out_root)
