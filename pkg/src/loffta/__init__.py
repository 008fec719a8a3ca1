"""Train compact classifiers on cached foundation-model features.

Workflow: a provider writes feature records (CLS vector + spatial token
grid + label) into binary shards once; training then reads only the cache,
augments the tensors spatially, and optimizes a small projection +
transformer classifier. Training cost depends on the cached tensor shape
and the classifier, never on the provider that produced the features.
"""

__version__ = "0.1.0"

from .augment import AugmentationPolicy, apply_policy
from .errors import LofftaError
from .model import ModelConfig
from .pooling import pool, pool_cache
from .provider import SyntheticSpec, build_cache
from .records import CacheManifest, FeatureRecord, ProviderDescriptor
from .store import ShardReader, SplitReader, validate_cache, write_shard
from .trainer import Metrics, TrainConfig, evaluate, train

__all__ = [
    "AugmentationPolicy", "apply_policy", "LofftaError", "ModelConfig",
    "pool", "pool_cache", "SyntheticSpec", "build_cache", "CacheManifest",
    "FeatureRecord", "ProviderDescriptor", "ShardReader", "SplitReader",
    "validate_cache", "write_shard", "Metrics", "TrainConfig", "evaluate",
    "train", "__version__",
]
