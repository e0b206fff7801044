"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class DataError(ValueError):
    """A dataset, archive, or manifest is malformed or unreadable."""


class ShapeError(ValueError):
    """A tensor does not match the shape a network or loss expects."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, incomplete, or incompatible."""


class NonFiniteLossError(RuntimeError):
    """A loss evaluated to NaN/inf; carries the offending breakdown."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


class TrainingAborted(RuntimeError):
    """Training stopped after repeated non-finite losses."""

    def __init__(self, message, breakdowns=()):
        super().__init__(message)
        self.breakdowns = list(breakdowns)
