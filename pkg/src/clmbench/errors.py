"""Shared exception types."""


class ConfigurationError(ValueError):
    """Invalid configuration: bad shapes, overlapping windows, unknown keys."""


class DataError(ValueError):
    """Malformed or insufficient input data (empty corpus, single-class labels)."""


class GradientCheckError(RuntimeError):
    """Non-finite loss encountered while checking a gradient; names the parameter."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries the last good parameters."""

    def __init__(self, message, last_good_params=None):
        super().__init__(message)
        self.last_good_params = last_good_params


class LeakageError(RuntimeError):
    """A guarded data split was read before the stage that unlocks it."""


class ReproducibilityError(RuntimeError):
    """A replayed run does not match its manifest (config hash or output drift)."""
