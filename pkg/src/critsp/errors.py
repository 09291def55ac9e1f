from __future__ import annotations


class CritSPError(Exception):
    """Base class for package errors."""


class UsageError(CritSPError, ValueError):
    """Invalid arguments or violated preconditions."""


class GridMismatchError(UsageError):
    pass


class ConfigError(CritSPError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class BoundaryLeakageError(UsageError):
    pass


class BoundaryLeakageWarning(UserWarning):
    pass


class NumericError(CritSPError, ArithmeticError):
    """A numerical procedure failed (bracketing, line search, ...)."""


class PreconditionError(UsageError):
    """Resolution or parameter-range precondition not met."""
