"""Spatial pooling of feature grids and whole caches.

Pooling a high-resolution cache down to the base grid size keeps every
downstream training cost constant regardless of the source resolution. Max
pooling is the documented default for features from large providers; average
pooling is the alternative.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CacheError, InvalidParameter
from .records import CacheManifest, FeatureRecord
from .store import (ShardReader, save_manifest, load_manifest, shard_path,
                    split_shard_paths, validate_cache, write_shard)

MODES = ("max", "average")


def pooled_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def pool(grid: np.ndarray, mode: str, kernel: int, stride: int) -> np.ndarray:
    """Per-channel max or average over kernel x kernel windows.

    Output is (h', w', d) with h' = floor((h - kernel) / stride) + 1; windows
    that do not fit are dropped, no padding.
    """
    if mode not in MODES:
        raise InvalidParameter(f"mode must be one of {MODES}, got {mode!r}")
    h, w, d = grid.shape
    if not 1 <= kernel <= min(h, w):
        raise InvalidParameter(
            f"kernel must be in [1, min(h, w)] = [1, {min(h, w)}], got {kernel}")
    if stride < 1:
        raise InvalidParameter(f"stride must be >= 1, got {stride}")
    windows = sliding_window_view(grid, (kernel, kernel), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (h', w', d, kernel, kernel)
    if mode == "max":
        out = windows.max(axis=(-2, -1))
    else:
        out = windows.astype(np.float64).mean(axis=(-2, -1))
    return np.ascontiguousarray(out, dtype=grid.dtype)


def pool_record(rec: FeatureRecord, mode: str, kernel: int,
                stride: int) -> FeatureRecord:
    """Pool the grid; cls and label pass through untouched."""
    return FeatureRecord(label=rec.label, cls=rec.cls.copy(),
                         grid=pool(rec.grid, mode, kernel, stride))


def pool_cache(in_root, out_root, mode: str, kernel: int,
               stride: int) -> CacheManifest:
    """Pool every record of a cache into a new cache directory.

    Record counts, labels, cls vectors, dtype, and split/shard structure are
    preserved; the manifest gains a pooling note, the new grid shape, and
    freshly computed per-channel normalization over the train split.
    """
    report = validate_cache(in_root)
    if report.errors:
        raise CacheError(
            f"input cache {in_root} is invalid: {report.errors[0]}")
    manifest = load_manifest(in_root)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    new_h = pooled_size(manifest.h, kernel, stride)
    new_w = pooled_size(manifest.w, kernel, stride)
    # running per-channel sums over train-split grid cells
    cell_sum = np.zeros(manifest.d, dtype=np.float64)
    cell_sumsq = np.zeros(manifest.d, dtype=np.float64)
    cell_count = 0

    for split in manifest.splits:
        for shard_file in split_shard_paths(in_root, split):
            with ShardReader(shard_file) as reader:
                pooled = []
                for i in range(len(reader)):
                    rec = pool_record(reader.read_record(i), mode, kernel,
                                      stride)
                    pooled.append(rec)
                    if split == "train":
                        flat = rec.grid.reshape(-1, manifest.d).astype(np.float64)
                        cell_sum += flat.sum(axis=0)
                        cell_sumsq += np.square(flat).sum(axis=0)
                        cell_count += flat.shape[0]
                write_shard(pooled, manifest.dtype, out_root / shard_file.name)

    normalization = None
    if cell_count:
        mean = cell_sum / cell_count
        var = np.maximum(cell_sumsq / cell_count - mean ** 2, 0.0)
        normalization = {"mean": mean.tolist(), "std": np.sqrt(var).tolist()}

    out_manifest = CacheManifest(
        dataset_name=manifest.dataset_name,
        class_names=list(manifest.class_names),
        provider=manifest.provider,
        d=manifest.d, h=new_h, w=new_w,
        dtype=manifest.dtype,
        splits=dict(manifest.splits),
        pooling={"mode": mode, "kernel": kernel, "stride": stride},
        normalization=normalization,
    )
    save_manifest(out_manifest, out_root)
    return out_manifest
