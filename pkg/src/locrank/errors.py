"""Exception hierarchy shared across the package."""


class LocrankError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LocrankError, ValueError):
    """Bad shapes, bad hyperparameters, or an invalid config key."""


class UsageError(LocrankError, ValueError):
    """An API was called in a way its contract does not allow."""


class NonFiniteError(LocrankError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class CheckpointError(LocrankError, ValueError):
    """Checkpoint file is truncated, has a bad magic/version, or mismatches."""


class DataError(LocrankError, ValueError):
    """Unreadable image, malformed manifest row, or unusable dataset."""
