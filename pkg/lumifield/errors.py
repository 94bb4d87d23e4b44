"""Exceptions raised by lumifield."""


class LumifieldError(Exception):
    """Base class for all package errors."""


class FormatError(LumifieldError, ValueError):
    """File is malformed, truncated or written by an unknown version."""


class ConfigError(LumifieldError, ValueError):
    """Invalid configuration value or flag combination."""


class SceneError(LumifieldError, ValueError):
    """Scene description failed validation."""


class TrainingDiverged(LumifieldError, RuntimeError):
    """Loss became NaN or infinite during fitting.

    Attributes:
        iteration: iteration at which the non finite loss was observed.
        last_terms: last finite LossTerms, or None.
        snapshot: path of the diagnostic snapshot, or None if none was written.
    """

    def __init__(self, iteration, last_terms=None, snapshot=None):
        self.iteration = iteration
        self.last_terms = last_terms
        self.snapshot = snapshot
        message = "non finite loss at iteration {}".format(iteration)
        if snapshot:
            message += " (snapshot: {})".format(snapshot)
        super().__init__(message)
