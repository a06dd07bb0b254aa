"""Exception hierarchy shared across the package."""


class RedbertError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RedbertError):
    """Operand shapes are incompatible."""


class ConfigError(RedbertError):
    """Invalid configuration, vocabulary, or label set."""


class DataError(RedbertError):
    """Malformed or out-of-range input data."""


class NumericError(RedbertError):
    """Non-finite values where finite ones are required."""


class ContractError(RedbertError):
    """An operation was called outside its contract."""


class RunError(RedbertError):
    """A training run failed (e.g. divergence)."""
