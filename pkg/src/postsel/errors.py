"""Exception types raised by the engine."""

from __future__ import annotations


class PostselError(Exception):
    """Base class for all errors raised by :mod:`postsel`."""


class SingularDesignError(PostselError, ValueError):
    """The design (or a leading block of it) is numerically singular."""


class DegenerateResidualError(PostselError, ArithmeticError):
    """Residual sum of squares is zero; sigma_hat and t-statistics are undefined."""


class ConditioningError(PostselError):
    """The conditioning event {p_hat = p} has numerically negligible probability."""

    def __init__(self, message, probability=None):
        super().__init__(message)
        self.probability = probability


class ToleranceError(PostselError, ArithmeticError):
    """Numerical integration did not reach the requested tolerance.

    ``best`` holds the last estimate and ``error`` its estimated absolute error.
    """

    def __init__(self, message, best=None, error=None):
        super().__init__(message)
        self.best = best
        self.error = error


class ConfigError(PostselError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
