"""Exception types raised across the package."""


class EgoTRError(Exception):
    """Base class for all package errors."""


class DimensionError(EgoTRError, ValueError):
    """Tensor shapes do not agree."""


class UsageError(EgoTRError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(EgoTRError, ValueError):
    """A configuration is inconsistent or contains unknown keys."""


class DataError(EgoTRError, KeyError):
    """Dataset contents do not match what was requested."""

    def __str__(self):
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class CheckpointError(EgoTRError, ValueError):
    """A checkpoint file is malformed or incompatible with the requested model."""


class NonFiniteError(EgoTRError, FloatingPointError):
    """A NaN or Inf appeared in a tensor or a loss value."""
