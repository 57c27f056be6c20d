"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while debug validation was enabled."""


class FormatError(ValueError):
    """A binary or text file does not follow its declared format."""


class DataValidationError(ValueError):
    """Corpus content violates an integrity rule (unknown ids, duplicates, ...)."""


class ZeroVarianceError(ValueError):
    """A correlation was requested for a constant series."""


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""
