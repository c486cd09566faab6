"""Exception hierarchy shared by every module."""


class SaferError(Exception):
    """Base class for all package errors."""


class ConfigError(SaferError, ValueError):
    pass


class ShapeError(SaferError, ValueError):
    pass


class NumericError(SaferError, ArithmeticError):
    pass


class SplitError(SaferError, ValueError):
    pass


class PreconditionError(SaferError, ValueError):
    pass


class InsufficientDataError(SaferError, ValueError):
    pass


class BoundViolationError(SaferError, ValueError):
    pass


class UndefinedMetricError(SaferError, ValueError):
    pass


class ModelStateError(SaferError, RuntimeError):
    pass


class CohortParseError(SaferError, ValueError):
    """Raised for a malformed cohort file; carries the 1-based line number."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class PositivityWarning(UserWarning):
    """Recommended treatments fall outside the observed treatment support."""
