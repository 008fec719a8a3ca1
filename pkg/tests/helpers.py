"""Shared factories for tests. Oracles stay in the test files themselves."""

from __future__ import annotations

import numpy as np

from loffta.records import CacheManifest, FeatureRecord, ProviderDescriptor


def make_grid(seed: int, h: int, w: int, d: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(h, w, d)).astype(np.float32)


def make_record(seed: int, h: int = 2, w: int = 2, d: int = 4,
                label: int = 0) -> FeatureRecord:
    rng = np.random.default_rng(seed)
    return FeatureRecord(label=label,
                         cls=rng.normal(size=d).astype(np.float32),
                         grid=rng.normal(size=(h, w, d)).astype(np.float32))


def make_manifest(d: int, h: int, w: int, splits: dict, num_classes: int = 4,
                  dtype: str = "f32") -> CacheManifest:
    return CacheManifest(
        dataset_name="unit",
        class_names=[f"c{i}" for i in range(num_classes)],
        provider=ProviderDescriptor(name="unit", param_count=0, patch_size=1,
                                    source_image_size=h),
        d=d, h=h, w=w, dtype=dtype, splits=splits)
