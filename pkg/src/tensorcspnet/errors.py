"""Exception hierarchy shared by every module."""


class TensorCSPNetError(Exception):
    """Base class for package errors."""


class DomainError(TensorCSPNetError, ValueError):
    """An input lies outside the domain of the requested operation."""


class NumericalError(TensorCSPNetError, RuntimeError):
    """An iterative routine failed to converge.

    Attributes
    ----------
    residual : float
        Last residual (or gradient norm) reached before giving up.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class ConfigError(TensorCSPNetError, ValueError):
    """Invalid configuration; ``field`` names the offending entry when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
