"""Training loop: cached records -> augment -> classifier -> AdamW.

The loop never touches any feature provider; it only reads shards. All
randomness (init, per-epoch shuffle, per-record augmentation) derives from
the single config seed, keyed so that results are independent of how batch
preparation is parallelized.
"""

from __future__ import annotations

import dataclasses
import json
import os
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import memtrack
from .augment import AugmentationPolicy, apply_policy
from .errors import (CacheError, DivergenceError, EmptySplit, InvalidValue,
                     ShapeMismatch)
from .model import (ModelConfig, cross_entropy, decays, forward_pass,
                    init_params, loss_and_grads, save_checkpoint,
                    load_checkpoint)
from .rng import RngStream
from .store import SplitReader, load_manifest, validate_cache

# rng namespace tags
TAG_INIT = 0
TAG_SHUFFLE = 1
TAG_AUGMENT = 2

MIN_LR = 1e-6  # plateau decay floor

EVAL_METRICS = ("accuracy", "mean_class_recall")


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 50
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 64
    max_epochs: int = 200
    seed: int = 0
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    eval_metric: str = "accuracy"

    def __post_init__(self):
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        if not (0.0 < self.plateau_factor < 1.0):
            raise InvalidValue(
                f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1:
            raise InvalidValue(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 0:
            raise InvalidValue(f"warmup_steps must be >= 0")
        if self.peak_lr <= 0:
            raise InvalidValue(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.plateau_patience < 1:
            raise InvalidValue(f"plateau_patience must be >= 1")
        if self.weight_decay < 0:
            raise InvalidValue(f"weight_decay must be >= 0")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise InvalidValue(f"betas must be in [0, 1), got {self.betas}")
        if self.max_epochs < 0:
            raise InvalidValue(f"max_epochs must be >= 0")
        if self.eval_metric not in EVAL_METRICS:
            raise InvalidValue(
                f"eval_metric must be one of {EVAL_METRICS}, got {self.eval_metric!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["policy"] = self.policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidValue(f"unknown train config fields: {sorted(unknown)}")
        if "betas" in known:
            known["betas"] = tuple(known["betas"])
        if "policy" in known and isinstance(known["policy"], dict):
            known["policy"] = AugmentationPolicy.from_dict(known["policy"])
        return cls(**known)


@dataclass
class PlateauState:
    current_lr: float
    best_metric: float = float("-inf")
    epochs_since_improvement: int = 0


def lr_at(step: int, epoch_end_metric: float | None, cfg: TrainConfig,
          state: PlateauState) -> tuple[float, PlateauState]:
    """Learning rate for a step, folding in an end-of-epoch metric if given.

    Warmup ramps linearly to peak_lr over warmup_steps. Afterwards the rate
    holds at current_lr, which decays by plateau_factor whenever the metric
    has not improved for plateau_patience consecutive epochs (counter resets
    after each decay), floored at MIN_LR. Returns the rate and the updated
    state; the input state is not mutated.
    """
    state = dataclasses.replace(state)
    if epoch_end_metric is not None:
        if epoch_end_metric > state.best_metric:
            state.best_metric = epoch_end_metric
            state.epochs_since_improvement = 0
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= cfg.plateau_patience:
                state.current_lr = max(state.current_lr * cfg.plateau_factor,
                                       MIN_LR)
                state.epochs_since_improvement = 0
    if step < cfg.warmup_steps:
        lr = cfg.peak_lr * (step + 1) / cfg.warmup_steps
    else:
        lr = state.current_lr
    return lr, state


class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments.

    Decay multiplies the parameter by (1 - lr * weight_decay) before the
    moment update is applied, and only touches 2-D weight matrices: LN
    parameters, biases, the learned CLS, and positional embeddings never
    decay.
    """

    def __init__(self, params: dict[str, np.ndarray],
                 betas: tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.0, eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: memtrack.track(np.zeros_like(v)) for k, v in params.items()}
        self.v = {k: memtrack.track(np.zeros_like(v)) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(
                    f"gradient shape {g.shape} != param shape {p.shape} "
                    f"for {name}")
            if self.weight_decay > 0 and decays(name):
                p *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(optimizer: AdamW, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """Functional wrapper over AdamW.step; updates params in place."""
    optimizer.step(params, grads, lr)
    return params


@dataclass
class Metrics:
    accuracy: float
    mean_class_recall: float
    loss: float

    def value(self, name: str) -> float:
        if name not in EVAL_METRICS:
            raise InvalidValue(f"unknown metric {name!r}")
        return getattr(self, name)


class MetricsLog:
    """Per-step / per-epoch rows, optionally mirrored to an ndjson file."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self._file = open(path, "w") if path else None

    def log(self, step: int, epoch: int, split: str, loss: float,
            metric: float | None, lr: float) -> None:
        row = {"step": step, "epoch": epoch, "split": split,
               "loss": loss, "metric": metric, "lr": lr}
        self.rows.append(row)
        if self._file:
            self._file.write(json.dumps(row) + "\n")
            self._file.flush()

    def close(self):
        if self._file:
            self._file.close()
            self._file = None


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("LOFFTA_NUM_WORKERS", "1")))
    except ValueError:
        return 1


class TrainingSession:
    """Owns the pieces of one training run: readers, params, optimizer.

    Exposes epoch_batches / prepare_batch / run_step so both the real
    training loop and the benchmark drive the identical machinery.
    """

    def __init__(self, cache_root, cfg: TrainConfig,
                 model_config: ModelConfig | None = None):
        self.cache_root = Path(cache_root)
        self.cfg = cfg
        self.manifest = load_manifest(self.cache_root)
        if "train" not in self.manifest.splits:
            raise CacheError(f"cache {cache_root} has no train split")
        self.train_reader = SplitReader(self.cache_root, "train")
        mf = self.manifest
        if model_config is None:
            model_config = ModelConfig(feature_dim=mf.d, grid_h=mf.h,
                                       grid_w=mf.w,
                                       num_classes=mf.num_classes)
        if (model_config.feature_dim, model_config.grid_h,
                model_config.grid_w) != (mf.d, mf.h, mf.w):
            raise ShapeMismatch(
                f"model expects (d={model_config.feature_dim}, "
                f"h={model_config.grid_h}, w={model_config.grid_w}), cache has "
                f"(d={mf.d}, h={mf.h}, w={mf.w})")
        if model_config.num_classes < mf.num_classes:
            raise ShapeMismatch(
                f"model has {model_config.num_classes} classes, cache has "
                f"{mf.num_classes}")
        self.model_config = model_config
        root_rng = RngStream(cfg.seed)
        self.params = init_params(model_config, root_rng.derive(TAG_INIT))
        self.optimizer = AdamW(self.params, betas=cfg.betas,
                               weight_decay=cfg.weight_decay)
        self.plateau = PlateauState(current_lr=cfg.peak_lr)
        self.step_count = 0
        self._workers = _num_workers()
        self._pool = (ThreadPoolExecutor(max_workers=self._workers)
                      if self._workers > 1 else None)

    # -- data ------------------------------------------------------------

    def epoch_batches(self, epoch: int):
        """Seeded permutation of the train split, chunked into batches."""
        n = len(self.train_reader)
        perm = RngStream(self.cfg.seed).derive(TAG_SHUFFLE, epoch).permutation(n)
        bs = self.cfg.batch_size
        for i in range(0, n, bs):
            yield perm[i:i + bs]

    def _load_one(self, epoch: int, dataset_index: int):
        rec = self.train_reader.read_record(int(dataset_index))
        rng = RngStream(self.cfg.seed).derive(TAG_AUGMENT, epoch,
                                              int(dataset_index))
        return apply_policy(rec, self.cfg.policy, rng)

    def prepare_batch(self, indices, epoch: int):
        """Read + augment one batch. Augmentation streams are keyed by
        (seed, epoch, dataset index), so worker parallelism cannot change
        the result."""
        if self._pool is not None:
            recs = list(self._pool.map(
                lambda j: self._load_one(epoch, j), indices))
        else:
            recs = [self._load_one(epoch, j) for j in indices]
        k = recs[0].grid.shape[0] * recs[0].grid.shape[1]
        grid = memtrack.track(np.stack(
            [r.grid.reshape(k, -1) for r in recs]).astype(np.float32))
        cls = memtrack.track(np.stack([r.cls for r in recs]).astype(np.float32))
        labels = memtrack.track(np.array([r.label for r in recs], dtype=np.int64))
        return grid, cls, labels

    # -- optimization ------------------------------------------------------

    def run_step(self, grid, cls, labels) -> tuple[float, float]:
        """One optimization step; returns (loss, lr)."""
        lr, self.plateau = lr_at(self.step_count, None, self.cfg, self.plateau)
        loss, grads = loss_and_grads(self.params, self.model_config, grid,
                                     cls, labels)
        if not math.isfinite(loss):
            raise DivergenceError(self.step_count)
        self.optimizer.step(self.params, grads, lr)
        self.step_count += 1
        return loss, lr

    def end_epoch(self, metric: float) -> None:
        _, self.plateau = lr_at(self.step_count, metric, self.cfg, self.plateau)

    def close(self):
        self.train_reader.close()
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- evaluation -----------------------------------------------------------

def evaluate_params(params, model_config: ModelConfig, reader: SplitReader,
                    num_classes: int, batch_size: int = 64) -> Metrics:
    """Deterministic augmentation-free pass over a whole split."""
    n = len(reader)
    if n == 0:
        raise EmptySplit(f"split {reader.split!r} has no records")
    total_loss = 0.0
    hits = np.zeros(num_classes, dtype=np.int64)
    support = np.zeros(num_classes, dtype=np.int64)
    correct = 0
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        recs = [reader.read_record(i) for i in idx]
        k = recs[0].grid.shape[0] * recs[0].grid.shape[1]
        grid = np.stack([r.grid.reshape(k, -1) for r in recs])
        cls = np.stack([r.cls for r in recs])
        labels = np.array([r.label for r in recs], dtype=np.int64)
        logits, _ = forward_pass(params, model_config, grid, cls)
        loss, _, _ = cross_entropy(logits, labels)
        total_loss += loss * len(recs)
        pred = logits.argmax(axis=1)
        correct += int((pred == labels).sum())
        for lab, p in zip(labels, pred):
            support[lab] += 1
            if lab == p:
                hits[lab] += 1
    seen = support > 0
    recalls = hits[seen] / support[seen]
    return Metrics(accuracy=correct / n,
                   mean_class_recall=float(recalls.mean()),
                   loss=total_loss / n)


def evaluate(cache_root, split: str, checkpoint_path,
             batch_size: int = 64) -> Metrics:
    """Evaluate a saved checkpoint on one split of a cache."""
    manifest = load_manifest(cache_root)
    if split not in manifest.splits:
        raise CacheError(f"cache has no split {split!r}")
    params, model_config, _, _ = load_checkpoint(checkpoint_path)
    with SplitReader(cache_root, split) as reader:
        return evaluate_params(params, model_config, reader,
                               manifest.num_classes, batch_size)


# -- the full loop ----------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_metric: float
    metrics: MetricsLog
    steps: int
    model_config: ModelConfig
    best_checkpoint: Path | None = None
    final_checkpoint: Path | None = None


def train(cache_root, cfg: TrainConfig, model_config: ModelConfig | None = None,
          out_dir=None, max_steps: int | None = None,
          stop_fn=None) -> TrainResult:
    """Run the optimization loop on a cached dataset.

    Per epoch: seeded shuffle, augment, forward/backward/AdamW; then an
    augmentation-free evaluation on the val split, plateau bookkeeping, and
    a best-by-metric checkpoint. Training halts after max_epochs, or earlier
    when max_steps optimization steps have run or stop_fn(epoch, metrics)
    returns true.
    """
    report = validate_cache(cache_root)
    if report.errors:
        raise CacheError(f"invalid cache {cache_root}: {report.errors[0]}")
    manifest = load_manifest(cache_root)
    if "val" not in manifest.splits:
        raise CacheError(f"cache {cache_root} has no val split")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out_dir / "metrics.ndjson" if out_dir else None)

    session = TrainingSession(cache_root, cfg, model_config)
    best_metric = float("-inf")
    best_params = {k: v.copy() for k, v in session.params.items()}
    best_ckpt = final_ckpt = None

    with session, SplitReader(cache_root, "val") as val_reader:
        budget_left = lambda: max_steps is None or session.step_count < max_steps
        for epoch in range(cfg.max_epochs):
            if not budget_left():
                break
            for indices in session.epoch_batches(epoch):
                grid, cls, labels = session.prepare_batch(indices, epoch)
                loss, lr = session.run_step(grid, cls, labels)
                log.log(session.step_count - 1, epoch, "train", loss, None, lr)
                if not budget_left():
                    break
            metrics = evaluate_params(session.params, session.model_config,
                                      val_reader, manifest.num_classes,
                                      cfg.batch_size)
            metric_value = metrics.value(cfg.eval_metric)
            session.end_epoch(metric_value)
            log.log(session.step_count, epoch, "val", metrics.loss,
                    metric_value, session.plateau.current_lr)
            if metric_value > best_metric:
                best_metric = metric_value
                best_params = {k: v.copy() for k, v in session.params.items()}
                if out_dir is not None:
                    best_ckpt = out_dir / "checkpoint-best.lftc"
                    save_checkpoint(best_ckpt, best_params,
                                    session.model_config, session.step_count,
                                    extra={"metric": best_metric,
                                           "eval_metric": cfg.eval_metric})
            if stop_fn is not None and stop_fn(epoch, metrics):
                break
        if out_dir is not None:
            final_ckpt = out_dir / "checkpoint-final.lftc"
            save_checkpoint(final_ckpt, session.params, session.model_config,
                            session.step_count)
        log.close()
        return TrainResult(params=session.params, best_params=best_params,
                           best_metric=best_metric, metrics=log,
                           steps=session.step_count,
                           model_config=session.model_config,
                           best_checkpoint=best_ckpt,
                           final_checkpoint=final_ckpt)
