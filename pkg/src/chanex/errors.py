"""Exception types shared across the package."""


class ChanexError(Exception):
    """Base class for all package errors."""


class DimensionError(ChanexError, ValueError):
    """Tensor shapes are incompatible; the message names the offending axis."""


class ValidationError(ChanexError, ValueError):
    """A value violates a documented precondition (label range, region bounds, ...)."""


class ConfigurationError(ChanexError, ValueError):
    """A structural configuration is unsupported (stream count, variant name, ...)."""


class ContractError(ChanexError, TypeError):
    """An API contract was violated (e.g. backward() on a non-scalar)."""


class NumericError(ChanexError, ArithmeticError):
    """A non-finite value appeared; the message names where."""


class FormatError(ChanexError, ValueError):
    """A binary file (dataset, checkpoint) is corrupt or has the wrong magic."""


class ParseError(ChanexError, ValueError):
    """A config file failed to parse; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
