"""Exception hierarchy shared by every module."""

from __future__ import annotations


class CvidpError(Exception):
    """Base class for all package errors."""


class ParameterError(CvidpError, ValueError):
    """A parameter bundle violates its validity invariants."""


class ConditioningError(CvidpError, ValueError):
    """A covariance that must be inverted is singular or indefinite."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class PosteriorValidityError(CvidpError, ValueError):
    """A block-tridiagonal precision failed to factorize."""

    def __init__(self, message: str, block: int | None = None):
        super().__init__(message)
        self.block = block


class DivergenceError(CvidpError, RuntimeError):
    """An iterative method diverged or produced non-finite values."""


class ConfigError(CvidpError, ValueError):
    """Invalid experiment or algorithm configuration."""

    def __init__(self, message: str, field: str | None = None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class NumericalUnderweightError(CvidpError, RuntimeError):
    """All particle weights vanished at some step."""
