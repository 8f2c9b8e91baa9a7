"""Exception hierarchy shared across the package."""


class RawSplatError(Exception):
    """Base class for all package errors."""


class ValidationError(RawSplatError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """A binary file has the wrong magic or layout."""


class LengthError(FormatError):
    """A binary payload is truncated or has trailing bytes."""


class ModelRangeError(RawSplatError, ValueError):
    """Noise model evaluated outside its valid operating range."""


class DomainError(RawSplatError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class SingularVarianceError(RawSplatError, ZeroDivisionError):
    """A per-pixel noise standard deviation is zero."""


class InsufficientDataError(RawSplatError, ValueError):
    """Too few samples to estimate the requested quantity."""


class RankDeficientError(RawSplatError, ValueError):
    """A least-squares design matrix is rank deficient."""


class ConvergenceError(RawSplatError, ArithmeticError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularityError(RawSplatError, ArithmeticError):
    """An iterative solver hit a singular Jacobian."""


class TrainingError(RawSplatError, RuntimeError):
    """Optimization produced non-finite values."""
