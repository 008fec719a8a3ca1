"""Feature cache extraction with frozen vision transformer backbones."""

from .errors import ExtractError, GridAmbiguity, InvalidValue
from .extract import ExtractResult, extract_images, grid_shape, pool_grid
from .verify import VerifyReport, verify_against_primary
from .vit import MODELS, FrozenViT, ViTSpec, load_model

__version__ = "0.1.0"

__all__ = [
    "ExtractError", "ExtractResult", "FrozenViT", "GridAmbiguity",
    "InvalidValue", "MODELS", "VerifyReport", "ViTSpec", "__version__",
    "extract_images", "grid_shape", "load_model", "pool_grid",
    "verify_against_primary",
]
