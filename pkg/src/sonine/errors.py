"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class SonineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SonineError, ValueError):
    """A parameter or input violates a documented precondition."""


class DomainError(SonineError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DataError(SonineError, ValueError):
    """Input data (norm series, samples) cannot be used as given."""


class IntegrityError(SonineError):
    """A kernel evaluator returned a NaN or a negative value."""


class AccuracyError(SonineError, ArithmeticError):
    """A numerical method could not reach its accuracy target.

    ``diagnostics`` carries whatever the failing routine knows about the
    failure (tail bounds, residual traces, branch information).
    """

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class SpecialFunctionOverflow(SonineError, OverflowError):
    """A special function value exceeds the double-precision range."""
