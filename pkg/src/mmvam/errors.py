"""Exception and warning types raised across the package."""

from __future__ import annotations


class MMVAMError(Exception):
    """Base class for all package errors."""


class ConfigError(MMVAMError):
    """Bad configuration, e.g. a schema naming a column that does not exist."""


class ParseError(MMVAMError):
    """A malformed input row."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ValidationError(MMVAMError):
    """Input parsed but violates a data invariant."""


class DimensionError(MMVAMError):
    """Declared dimensions are inconsistent with the data."""


class DesignError(MMVAMError):
    """A model design cannot be built for this dataset/variant."""


class PDViolationError(MMVAMError):
    """A covariance block that must be positive definite is not."""

    def __init__(self, message: str, block=None):
        self.block = block
        super().__init__(message)


class FactorizationError(MMVAMError):
    """Cholesky factorization met a non-positive pivot."""

    def __init__(self, message: str, pivot: int | None = None):
        self.pivot = pivot
        super().__init__(message)


class EStepError(MMVAMError):
    """The E-step could not be computed at the current parameters."""


class MStepError(MMVAMError):
    """An iterative M-step failed; carries the last iterate."""

    def __init__(self, message: str, last_iterate=None, score_norm: float | None = None):
        self.last_iterate = last_iterate
        self.score_norm = score_norm
        super().__init__(message)


class RankError(MMVAMError):
    """A normal matrix is singular (collinear fixed effects)."""


class IdentifiabilityError(MMVAMError):
    """Persistence parameters are not identified (insufficient mixing)."""


class OracleCapError(MMVAMError):
    """A dense oracle was asked to run above its size cap."""


class BoundaryWarning(UserWarning):
    """A variance parameter was floored at the boundary of the parameter space."""


class ConvergenceWarning(UserWarning):
    """EM stopped without meeting the convergence criterion, or a post-fit check failed."""
