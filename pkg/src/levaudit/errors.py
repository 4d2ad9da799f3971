"""Typed errors shared across the package."""
from __future__ import annotations


class LevauditError(Exception):
    """Base class for all package-specific errors."""


class InputFormatError(LevauditError, ValueError):
    """Malformed dataset, checkpoint, or config input."""


class DimensionMismatch(LevauditError, ValueError):
    """Operand shapes are incompatible with the model or dataset."""


class RankDeficient(LevauditError):
    """Design matrix is rank deficient beyond the conditioning tolerance."""

    def __init__(self, message: str, condition_number: float | None = None):
        super().__init__(message)
        self.condition_number = condition_number


class DegenerateLaw(LevauditError):
    """Leverage at (or numerically at) 1: the member residual law collapses."""


class NonConvergence(LevauditError):
    """An iterative routine exhausted its budget before reaching tolerance.

    Carries whatever partial state the caller can still use: the best achieved
    gradient norm for optimizers, per-column residuals and the partial solution
    for linear solvers.
    """

    def __init__(
        self,
        message: str,
        *,
        best_norm: float | None = None,
        residuals=None,
        partial=None,
        iterations: int | None = None,
    ):
        super().__init__(message)
        self.best_norm = best_norm
        self.residuals = residuals
        self.partial = partial
        self.iterations = iterations


class GridMismatch(LevauditError, ValueError):
    """Two curves were compared on different alpha grids."""


class IndefiniteCurvature(LevauditError):
    """CG met a direction of non-positive curvature (damping too small)."""


class SingularHessian(LevauditError):
    """Dense Hessian factorization failed; increase damping."""


class SingularWeightedGram(LevauditError):
    """Weighted Gram matrix is singular (degenerate predicted probabilities)."""


class FeasibilityGuard(LevauditError):
    """Requested dense computation exceeds the size guard."""


class NotASimplex(LevauditError, ValueError):
    """Vector is not a probability simplex point within tolerance."""


class DegenerateFit(LevauditError):
    """Too few observations to fit a per-sample Gaussian."""


class ZeroVariance(LevauditError):
    """Rank correlation undefined: one of the rank vectors is constant."""


class InsufficientShadows(LevauditError):
    """Too few usable shadow models to calibrate an attack."""


class NonOptimalModelWarning(UserWarning):
    """Model gradient norm is far above its training tolerance; sensitivity
    scores computed from it are only approximate."""
