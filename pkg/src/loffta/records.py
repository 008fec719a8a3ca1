"""Core data types: feature records, provider metadata, cache manifests."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidValue, ShapeMismatch

DTYPE_CODES = {"f32": 0, "f16": 1}
DTYPE_NAMES = {v: k for k, v in DTYPE_CODES.items()}
DTYPE_NUMPY = {"f32": np.float32, "f16": np.float16}

MANIFEST_FORMAT_VERSION = 1


@dataclass
class FeatureRecord:
    """One cached example: class label, CLS vector, and spatial feature grid.

    ``grid`` has shape (h, w, d) and ``cls`` shape (d,). Values are kept in
    float32 in memory regardless of on-disk precision.
    """

    label: int
    cls: np.ndarray
    grid: np.ndarray

    def __post_init__(self):
        self.cls = np.ascontiguousarray(self.cls, dtype=np.float32)
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.cls.ndim != 1:
            raise ShapeMismatch(f"cls must be 1-D, got shape {self.cls.shape}")
        if self.grid.ndim != 3:
            raise ShapeMismatch(
                f"grid must be (h, w, d), got shape {self.grid.shape}")
        if self.grid.shape[2] != self.cls.shape[0]:
            raise ShapeMismatch(
                f"grid depth {self.grid.shape[2]} != cls depth {self.cls.shape[0]}")
        if self.label < 0:
            raise InvalidValue(f"label must be non-negative, got {self.label}")
        if not np.isfinite(self.cls).all() or not np.isfinite(self.grid).all():
            raise InvalidValue("record contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape  # type: ignore[return-value]

    @classmethod
    def trusted(cls, label: int, cls_vec: np.ndarray,
                grid: np.ndarray) -> "FeatureRecord":
        """Build without validation or copies.

        For readers whose geometry comes from an already-checked header;
        skipping the finite-value scan keeps per-read allocation at the
        two buffers (raw bytes, decoded floats) and nothing else.
        """
        rec = cls.__new__(cls)
        rec.label = label
        rec.cls = cls_vec
        rec.grid = grid
        return rec


@dataclass(frozen=True)
class ProviderDescriptor:
    """Metadata about the frozen feature provider. Never loads the model."""

    name: str
    param_count: int
    patch_size: int
    source_image_size: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProviderDescriptor":
        return cls(name=str(d["name"]),
                   param_count=int(d["param_count"]),
                   patch_size=int(d["patch_size"]),
                   source_image_size=int(d["source_image_size"]))


@dataclass
class CacheManifest:
    """Describes one feature cache directory: geometry, splits, provenance."""

    dataset_name: str
    class_names: list[str]
    provider: ProviderDescriptor
    d: int
    h: int
    w: int
    dtype: str
    splits: dict[str, dict]
    format_version: int = MANIFEST_FORMAT_VERSION
    pooling: dict | None = None
    normalization: dict | None = None

    def __post_init__(self):
        if self.dtype not in DTYPE_CODES:
            raise InvalidValue(f"unknown dtype {self.dtype!r}")
        if min(self.d, self.h, self.w) < 1:
            raise InvalidValue(
                f"non-positive geometry d={self.d} h={self.h} w={self.w}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> str:
        out = {
            "format_version": self.format_version,
            "dataset_name": self.dataset_name,
            "class_names": list(self.class_names),
            "provider": self.provider.to_dict(),
            "d": self.d,
            "h": self.h,
            "w": self.w,
            "dtype": self.dtype,
            "splits": self.splits,
        }
        if self.pooling is not None:
            out["pooling"] = self.pooling
        if self.normalization is not None:
            out["normalization"] = self.normalization
        return json.dumps(out, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "CacheManifest":
        d = json.loads(text)
        return cls(
            dataset_name=d["dataset_name"],
            class_names=list(d["class_names"]),
            provider=ProviderDescriptor.from_dict(d["provider"]),
            d=int(d["d"]),
            h=int(d["h"]),
            w=int(d["w"]),
            dtype=d["dtype"],
            splits=d["splits"],
            format_version=int(d.get("format_version", MANIFEST_FORMAT_VERSION)),
            pooling=d.get("pooling"),
            normalization=d.get("normalization"),
        )


def record_nbytes(d: int, h: int, w: int, dtype: str) -> int:
    """On-disk size of one record: u32 label + (cls + grid) values."""
    itemsize = np.dtype(DTYPE_NUMPY[dtype]).itemsize
    return 4 + (d + h * w * d) * itemsize
