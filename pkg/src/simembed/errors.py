"""Exception types shared across the package."""


class SimEmbedError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SimEmbedError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(SimEmbedError, ValueError):
    """A configuration value or document is invalid."""


class FormatError(SimEmbedError, ValueError):
    """A serialized file or byte stream is malformed."""


class NumericError(SimEmbedError, ArithmeticError):
    """A computation produced or received non-finite values."""


class DataError(SimEmbedError, ValueError):
    """Dataset contents violate a precondition (missing ids, empty pools,
    degenerate inputs)."""
