class DimensionError(ValueError):
    """Tensor extents do not line up for an operation."""


class NumericalError(RuntimeError):
    """A value that must be positive or finite was not."""


class ConfigError(ValueError):
    """Inconsistent run configuration (budget, presets, ...)."""


class FormatError(ValueError):
    """A file on disk does not match its expected binary layout."""
