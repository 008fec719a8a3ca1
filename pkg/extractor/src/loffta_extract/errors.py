"""Error types for the extraction pipeline."""


class ExtractError(Exception):
    """Base class for extraction failures."""


class InvalidValue(ExtractError):
    """A parameter or configuration value is out of contract."""


class GridAmbiguity(ExtractError):
    """The model's token count has no square spatial layout and no
    explicit (h, w) override was given."""
