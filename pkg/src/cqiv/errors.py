"""Exception types shared across the estimation stack."""

from __future__ import annotations


class CqivError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(CqivError, ValueError):
    """An argument is outside its documented domain."""


class EmptySampleError(CqivError):
    """No observation carries positive weight."""


class InsufficientSampleError(CqivError):
    """Fewer effective observations than parameters to estimate."""


class SingularDesignError(CqivError):
    """Design matrix is rank deficient on the effective sample."""

    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        super().__init__(message)
        self.columns = columns


class DegenerateOutcomeError(CqivError):
    """A binary outcome has only one class in the effective sample."""


class SeparationError(CqivError):
    """Binary likelihood has no interior maximum (perfect separation)."""


class ConvergenceError(CqivError):
    """Iterative fit did not meet its tolerance within the iteration cap."""

    def __init__(self, message: str, gradient_norm: float | None = None):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class DegenerateScaleError(CqivError):
    """A residual scale estimate collapsed to zero."""


class NoQuantileUncensoredError(CqivError):
    """No observation is predicted quantile-uncensored at the requested u."""

    def __init__(self, message: str, u: float | None = None):
        super().__init__(message)
        self.u = u


class SelectionCollapseError(CqivError):
    """A selection step produced an empty estimation sample."""


class UnsupportedFormulaError(CqivError):
    """The requested computation needs a formula shape this tool refuses."""


class InferenceUnreliableError(CqivError):
    """Too many bootstrap repetitions failed to trust the draws."""

    def __init__(self, message: str, reasons: tuple[str, ...] = ()):
        super().__init__(message)
        self.reasons = reasons


class InsufficientDrawsError(CqivError):
    """Too few successful bootstrap draws to form an interval."""


class DataError(CqivError):
    """Input data file is missing, malformed, or lacks referenced columns."""


class UsageError(CqivError):
    """Command line arguments are inconsistent or malformed."""
