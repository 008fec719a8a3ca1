"""Exception types shared across the package."""


class LofftaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(LofftaError):
    """Tensor or record shapes disagree where they must match."""


class InvalidValue(LofftaError):
    """A value violates a domain invariant (NaN/Inf, bad label, ...)."""


class InvalidParameter(LofftaError):
    """An operation parameter is outside its valid range."""


class StorageError(LofftaError):
    """An I/O failure while writing or reading cache files."""


class CorruptShard(LofftaError):
    """A shard file fails structural validation (magic, size, header)."""


class CacheError(LofftaError):
    """A cache directory is missing, inconsistent, or unusable."""


class EmptySplit(LofftaError):
    """An evaluation split contains no records."""


class DivergenceError(LofftaError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
