"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid dimensions."""


class NumericError(ArithmeticError):
    """A numeric domain violation: non-finite values, log of a non-positive
    entry, a covariance that fails its Cholesky factorization."""


class InsufficientBatchError(ValueError):
    """A batch is too small to produce meaningful sample statistics."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class FormatError(ValueError):
    """A serialized file is malformed; the message carries the byte offset
    where the problem was detected."""


class DatasetError(ValueError):
    """A dataset cannot support the requested operation."""
