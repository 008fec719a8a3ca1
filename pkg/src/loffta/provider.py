"""Synthetic feature provider: class-separable, spatially structured records.

Stands in for a frozen foundation model so the whole pipeline runs at desk
scale. Each class owns a mean direction plus a few smooth sinusoidal spatial
patterns, so geometric augmentations act on real structure rather than
i.i.d. noise. Class signal (mean norm and pattern amplitude) scales with
``gamma``; ``gamma = 0`` makes every class identically distributed.

Every call that synthesizes a record increments a module-level counter so
tests can assert that training never touches the provider.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import InvalidValue, StorageError
from .records import CacheManifest, FeatureRecord, ProviderDescriptor
from .rng import RngStream
from .store import save_manifest, shard_path, write_shard

# rng namespace tags: class basis vs per-record noise
_TAG_CLASS = 100
_TAG_RECORD = 101

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}

# incremented on every synthesized record; reset with reset_invocations()
INVOCATIONS = 0


def reset_invocations() -> None:
    global INVOCATIONS
    INVOCATIONS = 0


@dataclass
class SyntheticSpec:
    classes: int = 10
    per_class: dict = field(
        default_factory=lambda: {"train": 100, "val": 20, "test": 20})
    d: int = 64
    h: int = 8
    w: int = 8
    gamma: float = 3.0
    sigma: float = 1.0
    spatial_rank: int = 3
    pattern_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise InvalidValue(f"need at least 2 classes, got {self.classes}")
        if self.gamma < 0 or self.sigma < 0:
            raise InvalidValue("gamma and sigma must be >= 0")
        if self.spatial_rank < 1:
            raise InvalidValue("spatial_rank must be >= 1")
        if min(self.d, self.h, self.w) < 1:
            raise InvalidValue("d, h, w must be >= 1")
        bad = {k: v for k, v in self.per_class.items() if v < 1}
        if bad or not self.per_class:
            raise InvalidValue(f"per-class counts must be >= 1, got {self.per_class}")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes, "per_class": dict(self.per_class),
            "d": self.d, "h": self.h, "w": self.w, "gamma": self.gamma,
            "sigma": self.sigma, "spatial_rank": self.spatial_rank,
            "pattern_strength": self.pattern_strength, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidValue(f"unknown spec fields: {sorted(unknown)}")
        return cls(**known)


@lru_cache(maxsize=512)
def _class_basis(seed: int, c: int, d: int, h: int, w: int, gamma: float,
                 spatial_rank: int, pattern_strength: float):
    """Per-class structure: mean vector mu_c (norm gamma) and spatial_rank
    (field, amplitude-vector) pairs. Fields are smooth sinusoids in [-1, 1];
    amplitude norms are gamma * pattern_strength so the whole class signal
    vanishes at gamma = 0."""
    rng = RngStream(seed).derive(_TAG_CLASS, c)
    raw = rng.normal(size=d)
    mu = gamma * raw / np.linalg.norm(raw)

    rows = (np.arange(h, dtype=np.float64) + 0.5) / h
    cols = (np.arange(w, dtype=np.float64) + 0.5) / w
    fields = np.empty((spatial_rank, h, w))
    amps = np.empty((spatial_rank, d))
    for k in range(spatial_rank):
        fr = int(rng.integers(1, 3))
        fc = int(rng.integers(1, 3))
        pr = rng.uniform(0.0, 2.0 * math.pi)
        pc = rng.uniform(0.0, 2.0 * math.pi)
        fields[k] = np.sin(2.0 * math.pi * fr * rows + pr)[:, None] * \
            np.sin(2.0 * math.pi * fc * cols + pc)[None, :]
        raw_a = rng.normal(size=d)
        amps[k] = gamma * pattern_strength * raw_a / np.linalg.norm(raw_a)
    return mu, fields, amps


def synth_record(spec: SyntheticSpec, c: int, rng: RngStream) -> FeatureRecord:
    """One record of class c: grid = mu_c + sum_k field_k * amp_k + noise,
    cls = mu_c + noise. Noise comes from the caller-supplied stream."""
    global INVOCATIONS
    if not 0 <= c < spec.classes:
        raise InvalidValue(f"class {c} outside [0, {spec.classes})")
    INVOCATIONS += 1
    mu, fields, amps = _class_basis(spec.seed, c, spec.d, spec.h, spec.w,
                                    spec.gamma, spec.spatial_rank,
                                    spec.pattern_strength)
    grid = np.broadcast_to(mu, (spec.h, spec.w, spec.d)).copy()
    grid += np.tensordot(fields, amps, axes=(0, 0))
    if spec.sigma > 0:
        grid += rng.normal(0.0, spec.sigma, size=grid.shape)
        cls = mu + rng.normal(0.0, spec.sigma, size=spec.d)
    else:
        cls = mu.copy()
    return FeatureRecord(label=c, cls=cls.astype(np.float32),
                         grid=grid.astype(np.float32))


def record_stream(spec: SyntheticSpec, split: str, c: int, i: int) -> RngStream:
    """The derived noise stream for record i of class c in a split."""
    return RngStream(spec.seed).derive(_TAG_RECORD, SPLIT_IDS[split], c, i)


def build_cache(spec: SyntheticSpec, out_root, dtype: str = "f32") -> CacheManifest:
    """Write train/val/test shards plus manifest for a synthetic dataset.

    Records are ordered class-major within each split; the trainer reshuffles
    per epoch, so no interleaving is needed here. Per-channel normalization
    stats are computed over train-split grid cells.
    """
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create cache dir {out_root}: {e}") from e

    unknown = set(spec.per_class) - set(SPLIT_IDS)
    if unknown:
        raise InvalidValue(f"unknown split names: {sorted(unknown)}")

    splits: dict[str, int] = {}
    cell_sum = np.zeros(spec.d, dtype=np.float64)
    cell_sumsq = np.zeros(spec.d, dtype=np.float64)
    cell_count = 0
    for split, count in spec.per_class.items():
        records = []
        for c in range(spec.classes):
            for i in range(count):
                rec = synth_record(spec, c, record_stream(spec, split, c, i))
                records.append(rec)
                if split == "train":
                    flat = rec.grid.reshape(-1, spec.d).astype(np.float64)
                    cell_sum += flat.sum(axis=0)
                    cell_sumsq += np.square(flat).sum(axis=0)
                    cell_count += flat.shape[0]
        write_shard(records, dtype, shard_path(out_root, split, 0))
        splits[split] = len(records)

    normalization = None
    if cell_count:
        mean = cell_sum / cell_count
        var = np.maximum(cell_sumsq / cell_count - mean ** 2, 0.0)
        normalization = {"mean": mean.tolist(), "std": np.sqrt(var).tolist()}

    manifest = CacheManifest(
        dataset_name="synthetic",
        class_names=[f"class_{i:02d}" for i in range(spec.classes)],
        provider=ProviderDescriptor(name="synthetic", param_count=0,
                                    patch_size=1,
                                    source_image_size=max(spec.h, spec.w)),
        d=spec.d, h=spec.h, w=spec.w, dtype=dtype, splits=splits,
        normalization=normalization,
    )
    save_manifest(manifest, out_root)
    return manifest
