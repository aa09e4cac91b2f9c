"""Exception types raised across the lab."""


class HapoError(Exception):
    """Base class for lab errors."""


class ConfigError(HapoError, ValueError):
    """Invalid or incomplete configuration (bad field, missing teacher demo, ...)."""


class InfeasibleTaskError(HapoError, ValueError):
    """Requested task cannot be constructed, e.g. more solutions than sequences."""


class StateError(HapoError, RuntimeError):
    """An operation was called on data that has not been through a required stage."""


class RegimeError(HapoError, ValueError):
    """A bound was requested outside the regime where it applies."""


class NonFiniteGradientError(HapoError, FloatingPointError):
    """A training step produced a NaN or infinite gradient.

    ``dump`` carries the diagnostic snapshot collected at the failing step.
    """

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
