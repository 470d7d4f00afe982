"""Exception hierarchy shared by every cmunet module."""

from __future__ import annotations


class CMUNetError(Exception):
    """Base class for all errors raised by cmunet."""


class DimensionError(CMUNetError, ValueError):
    """A tensor has the wrong shape along a named axis."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message if axis is None else f"{message} (axis {axis})")
        self.axis = axis


class ConfigError(CMUNetError, ValueError):
    """Invalid hyperparameters or op configuration."""


class StateError(CMUNetError, RuntimeError):
    """An operation was invoked on state that is not ready for it."""


class ValidationError(CMUNetError, ValueError):
    """Input values fall outside an operation's domain."""


class NumericError(CMUNetError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class CheckpointError(CMUNetError):
    """A checkpoint file is corrupt or incompatible with the requested model."""


class DataError(CMUNetError):
    """Dataset files are missing or unreadable."""
