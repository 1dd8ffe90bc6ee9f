"""Exception hierarchy shared by every module.

Each error class maps to one CLI exit code (see ``cli.EXIT_CODES``).
"""


class GcdError(Exception):
    """Base class for all package errors."""


class DimensionError(GcdError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(GcdError, ValueError):
    """A scalar parameter is outside its valid range."""


class DataError(GcdError, ValueError):
    """Input data violates a precondition (labels out of range, empty input)."""


class BatchError(DataError):
    """A batch is too small for the requested statistic."""


class FormatError(GcdError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(GcdError, ValueError):
    """Configuration is invalid or inconsistent with a checkpoint."""


class NumericError(GcdError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""
