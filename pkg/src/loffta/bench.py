"""Throughput and working-memory benchmarks for the cached pipeline.

The numbers certify the decoupling mechanism: step cost depends only on
(batch size, tensor shape, classifier size), never on which provider wrote
the cache or how many parameters it had. Memory is the tracked live-buffer
total from the allocation registry; process RSS is reported as an
informational extra, not a contract.
"""

from __future__ import annotations

import gc
import json
import time
from dataclasses import dataclass, field
from statistics import median

import numpy as np
import psutil

from . import memtrack
from .errors import CacheError, EmptySplit, InvalidParameter
from .model import ModelConfig, cross_entropy, forward_pass, load_checkpoint
from .store import SplitReader, load_manifest, validate_cache
from .trainer import TrainConfig, TrainingSession, evaluate_params

WARMUP_STEPS = 3


@dataclass
class BenchReport:
    mode: str
    batch_size: int
    steps_measured: int
    images_per_sec: float
    median_step_ms: float
    per_step_ms: list[float]
    peak_tensor_bytes: int
    rss_bytes: int
    histogram: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    def to_table(self) -> str:
        rows = [
            ("mode", self.mode),
            ("batch_size", str(self.batch_size)),
            ("steps_measured", str(self.steps_measured)),
            ("images_per_sec", f"{self.images_per_sec:.2f}"),
            ("median_step_ms", f"{self.median_step_ms:.3f}"),
            ("peak_tensor_bytes", str(self.peak_tensor_bytes)),
            ("rss_bytes (info)", str(self.rss_bytes)),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        if self.histogram:
            lines.append("per-step ms histogram:")
            for b in self.histogram:
                lines.append(
                    f"  [{b['lo']:8.3f}, {b['hi']:8.3f}) {'#' * b['count']}")
        return "\n".join(lines)


def _histogram(values: list[float], bins: int = 8) -> list[dict]:
    if not values:
        return []
    counts, edges = np.histogram(np.array(values), bins=bins)
    return [{"lo": float(edges[i]), "hi": float(edges[i + 1]),
             "count": int(counts[i])} for i in range(len(counts))]


def bench_train(cache_root, cfg: TrainConfig, steps: int,
                model_config: ModelConfig | None = None) -> BenchReport:
    """Time full training steps (read + augment + forward/backward/update).

    The first WARMUP_STEPS steps are discarded; only full batches count.
    """
    if steps < 10:
        raise InvalidParameter(f"need at least 10 steps, got {steps}")
    report = validate_cache(cache_root)
    if report.errors:
        raise CacheError(f"invalid cache {cache_root}: {report.errors[0]}")

    times_ms: list[float] = []
    with TrainingSession(cache_root, cfg, model_config) as session:
        gc.collect()
        memtrack.reset_peak()
        epoch = 0
        while len(times_ms) < steps:
            for indices in session.epoch_batches(epoch):
                if len(indices) < cfg.batch_size:
                    continue
                t0 = time.perf_counter()
                grid, cls, labels = session.prepare_batch(indices, epoch)
                session.run_step(grid, cls, labels)
                times_ms.append((time.perf_counter() - t0) * 1e3)
                if len(times_ms) >= steps:
                    break
            epoch += 1
        peak = memtrack.peak_bytes()

    measured = times_ms[WARMUP_STEPS:]
    wall_s = sum(measured) / 1e3
    return BenchReport(
        mode="train",
        batch_size=cfg.batch_size,
        steps_measured=len(measured),
        images_per_sec=cfg.batch_size * len(measured) / wall_s,
        median_step_ms=median(measured),
        per_step_ms=measured,
        peak_tensor_bytes=peak,
        rss_bytes=psutil.Process().memory_info().rss,
        histogram=_histogram(measured),
    )


def bench_infer(cache_root, checkpoint_path=None, batch_size: int = 64,
                split: str = "test", passes: int = 1,
                params=None, model_config: ModelConfig | None = None) -> BenchReport:
    """Forward-only throughput over a split, no augmentation.

    Supply either a checkpoint path or (params, model_config) directly.
    The first batch of the first pass is warmup and not counted.
    """
    manifest = load_manifest(cache_root)
    if split not in manifest.splits:
        raise CacheError(f"cache has no split {split!r}")
    if params is None or model_config is None:
        if checkpoint_path is None:
            raise InvalidParameter("need a checkpoint or explicit params")
        params, model_config, _, _ = load_checkpoint(checkpoint_path)

    times_ms: list[float] = []
    images = 0
    with SplitReader(cache_root, split) as reader:
        n = len(reader)
        if n == 0:
            raise EmptySplit(f"split {split!r} has no records")
        gc.collect()
        memtrack.reset_peak()

        def run_batch(start: int) -> int:
            idx = range(start, min(start + batch_size, n))
            recs = [reader.read_record(i) for i in idx]
            k = recs[0].grid.shape[0] * recs[0].grid.shape[1]
            grid = np.stack([r.grid.reshape(k, -1) for r in recs])
            cls = np.stack([r.cls for r in recs])
            forward_pass(params, model_config, grid, cls)
            return len(recs)

        run_batch(0)  # untimed warmup; every real batch below is measured
        for _ in range(passes):
            for start in range(0, n, batch_size):
                t0 = time.perf_counter()
                count = run_batch(start)
                times_ms.append((time.perf_counter() - t0) * 1e3)
                images += count
        peak = memtrack.peak_bytes()

    wall_s = sum(times_ms) / 1e3 if times_ms else float("nan")
    return BenchReport(
        mode="infer",
        batch_size=batch_size,
        steps_measured=len(times_ms),
        images_per_sec=images / wall_s if times_ms else 0.0,
        median_step_ms=median(times_ms) if times_ms else float("nan"),
        per_step_ms=times_ms,
        peak_tensor_bytes=peak,
        rss_bytes=psutil.Process().memory_info().rss,
        histogram=_histogram(times_ms),
    )
