"""Exception types shared across the package."""


class MaskMineError(Exception):
    """Base class for all errors raised by maskmine."""


class ParameterError(MaskMineError, ValueError):
    """An argument is outside its admissible range."""


class ShapeError(MaskMineError, ValueError):
    """Array or tensor shapes are incompatible."""


class DomainError(MaskMineError, ValueError):
    """Array values are outside the admissible label set."""


class FormatError(MaskMineError, ValueError):
    """A file could not be parsed in the expected format."""


class ConsistencyError(MaskMineError, ValueError):
    """Two related objects disagree (shapes, configs, heads)."""


class ConfigurationError(MaskMineError, ValueError):
    """A model or run configuration is invalid."""


class DependencyError(MaskMineError, RuntimeError):
    """A required upstream artifact (checkpoint, stage) is missing."""


class NumericError(MaskMineError, ArithmeticError):
    """Non-finite values encountered in a computation."""
