"""Fixed-design Gaussian linear models: OLS, leverage, residual laws, and
analytic membership trade-off curves.

The membership game on a fixed design X: responses are Y = X @ theta_star + E
with isotropic Gaussian noise. A sample's leverage h = x_i^T (X^T X)^{-1} x_i
determines both residual laws — ||r_i||^2 is sigma^2 (1 - h) chi2(m) for
members and sigma^2 (1 + h) chi2(m) for fresh draws at the same x_i — and
therefore the entire power curve of the optimal membership test.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateLaw,
    DimensionMismatch,
    FeasibilityGuard,
    RankDeficient,
)
from .special import chi2_cdf, chi2_quantile  # re-exported: part of this API

__all__ = [
    "Dataset",
    "GenerativeConfig",
    "LinearFit",
    "Hypothesis",
    "ResidualLaw",
    "CurveKind",
    "TradeoffCurve",
    "fit_ols",
    "residual_law",
    "optimal_mia_statistic",
    "decision_threshold",
    "theoretical_tradeoff",
    "self_influence_identity_check",
    "default_alpha_grid",
    "chi2_cdf",
    "chi2_quantile",
]

_RCOND_FLOOR = 1e-12
_DEGENERATE_H = 1.0 - 1e-12
_XTX_INVERSE_MAX_D = 2000


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """A design matrix with responses; the shared input of every pipeline.

    Parameters
    ----------
    x : (n, d) array
        Design matrix, rows are sample points.
    y : (n, m) array
        Responses; one row per sample.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = _readonly(np.atleast_2d(self.x))
        y = _readonly(np.atleast_2d(self.y))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.ndim != 2 or y.ndim != 2:
            raise DimensionMismatch("x and y must be 2-D arrays")
        if y.shape[0] != x.shape[0]:
            raise DimensionMismatch(
                f"row mismatch: x has {x.shape[0]} rows, y has {y.shape[0]}"
            )
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ValueError("dataset entries must be finite")
        if x.shape[0] < x.shape[1]:
            raise RankDeficient(
                f"need n >= d, got n={x.shape[0]}, d={x.shape[1]}"
            )
        s = np.linalg.svd(x, compute_uv=False)
        if s[0] == 0.0 or s[-1] / s[0] < _RCOND_FLOOR:
            cond = math.inf if s[-1] == 0.0 else float(s[0] / s[-1])
            raise RankDeficient(
                f"design is rank deficient (condition number ~ {cond:.3e})",
                condition_number=cond,
            )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True, eq=False)
class GenerativeConfig:
    """True parameters and noise scale of the generative model."""

    theta_star: np.ndarray  # (d, m)
    sigma2: float
    seed: int = 0

    def __post_init__(self):
        theta = _readonly(np.atleast_2d(self.theta_star))
        object.__setattr__(self, "theta_star", theta)
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")


@dataclass(frozen=True, eq=False)
class LinearFit:
    """An OLS fit together with its leverage diagnostics."""

    theta_hat: np.ndarray  # (d, m)
    leverage: np.ndarray  # (n,)
    residuals: np.ndarray  # (n, m)
    singular_values: np.ndarray  # (d,)
    _vt: np.ndarray = field(repr=False)  # (d, d) right factor of the design

    @property
    def condition_number(self) -> float:
        s = self.singular_values
        return float(s[0] / s[-1])

    def xtx_inverse(self) -> np.ndarray:
        """(X^T X)^{-1}, materialized on demand (d <= 2000 guard)."""
        d = self._vt.shape[0]
        if d > _XTX_INVERSE_MAX_D:
            raise FeasibilityGuard(
                f"xtx_inverse materialization capped at d={_XTX_INVERSE_MAX_D}, got {d}"
            )
        v_scaled = self._vt.T / self.singular_values
        return v_scaled @ v_scaled.T


class Hypothesis(enum.Enum):
    MEMBER = "member"
    NON_MEMBER = "non_member"


@dataclass(frozen=True)
class ResidualLaw:
    """The law of ||r_i||^2 under one membership hypothesis.

    ||r||^2 / variance_scale follows chi2(df); variance_scale is
    sigma^2 (1 - h) for members and sigma^2 (1 + h) for non-members.
    """

    hypothesis: Hypothesis
    variance_scale: float
    df: int

    @property
    def mean_norm2(self) -> float:
        return self.variance_scale * self.df

    def norm2_cdf(self, t: float) -> float:
        return chi2_cdf(t / self.variance_scale, self.df)

    def norm2_quantile(self, p: float) -> float:
        return self.variance_scale * chi2_quantile(p, self.df)


class CurveKind(enum.Enum):
    THEORETICAL = "theoretical"
    EMPIRICAL = "empirical"


@dataclass(frozen=True, eq=False)
class TradeoffCurve:
    """A type-I/type-II error curve alpha -> beta at fixed leverage."""

    alpha_grid: np.ndarray
    beta: np.ndarray
    h: float
    m: int
    kind: CurveKind

    def __post_init__(self):
        alpha = _readonly(np.asarray(self.alpha_grid, dtype=np.float64))
        beta = _readonly(np.asarray(self.beta, dtype=np.float64))
        object.__setattr__(self, "alpha_grid", alpha)
        object.__setattr__(self, "beta", beta)
        if alpha.ndim != 1 or alpha.shape != beta.shape:
            raise DimensionMismatch("alpha_grid and beta must be equal-length vectors")
        if alpha.size == 0 or alpha[0] <= 0.0 or alpha[-1] >= 1.0:
            raise ValueError("alpha grid must lie strictly inside (0, 1)")
        if np.any(np.diff(alpha) <= 0):
            raise ValueError("alpha grid must be strictly increasing")
        if np.any(beta < -1e-12) or np.any(beta > 1 + 1e-12):
            raise ValueError("beta values must lie in [0, 1]")
        if self.kind is CurveKind.THEORETICAL and np.any(np.diff(beta) > 1e-12):
            raise ValueError("theoretical beta must be non-increasing in alpha")


def default_alpha_grid(count: int = 400) -> np.ndarray:
    """Log-spaced alpha grid in [1e-4, 1 - 1e-4] resolving the low-FPR regime."""
    return np.geomspace(1e-4, 1.0 - 1e-4, count)


def fit_ols(data: Dataset) -> LinearFit:
    """Least-squares fit via a single thin SVD of the design.

    The orthogonal factor gives the leverage directly (h_i = ||U_i||^2) and
    keeps the conditioning of X rather than X^T X; the inverse Gram matrix is
    derivable from the stored factors on demand.
    """
    u, s, vt = np.linalg.svd(data.x, full_matrices=False)
    if s[0] == 0.0 or s[-1] / s[0] < _RCOND_FLOOR:
        cond = math.inf if s[-1] == 0.0 else float(s[0] / s[-1])
        raise RankDeficient(
            f"design is rank deficient (condition number ~ {cond:.3e})",
            condition_number=cond,
        )
    theta_hat = vt.T @ ((u.T @ data.y) / s[:, None])
    leverage = np.einsum("ij,ij->i", u, u)
    residuals = data.y - data.x @ theta_hat
    return LinearFit(
        theta_hat=theta_hat,
        leverage=leverage,
        residuals=residuals,
        singular_values=s.copy(),
        _vt=vt.copy(),
    )


def _check_h(h: float, *, allow_one: bool) -> float:
    h = float(h)
    if not 0.0 <= h <= 1.0:
        raise ValueError(f"leverage must lie in [0, 1], got {h}")
    if not allow_one and h >= _DEGENERATE_H:
        raise DegenerateLaw(
            f"leverage {h} is at the interpolation boundary; the member "
            "residual law degenerates"
        )
    return h


def residual_law(
    h: float, sigma2: float, m: int, hypothesis: Hypothesis
) -> ResidualLaw:
    """Residual-norm law under the given membership hypothesis."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if m < 1:
        raise ValueError(f"output dimension must be >= 1, got {m}")
    if hypothesis is Hypothesis.MEMBER:
        h = _check_h(h, allow_one=False)
        scale = sigma2 * (1.0 - h)
    else:
        h = _check_h(h, allow_one=True)
        scale = sigma2 * (1.0 + h)
    return ResidualLaw(hypothesis=hypothesis, variance_scale=scale, df=int(m))


def optimal_mia_statistic(r_norm2, h: float, sigma2: float, m: int):
    """The likelihood-ratio membership statistic.

    S = (m/2) ln((1+h)/(1-h)) - h / (sigma2 (1 - h^2)) * ||r||^2,
    strictly decreasing in ||r||^2 and identically 0 at h = 0. Accepts a
    scalar or an array of squared residual norms.
    """
    h = _check_h(h, allow_one=False)
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    r_norm2 = np.asarray(r_norm2, dtype=np.float64)
    if np.any(r_norm2 < 0):
        raise ValueError("squared norms must be non-negative")
    const = 0.5 * m * math.log((1.0 + h) / (1.0 - h))
    slope = h / (sigma2 * (1.0 - h * h))
    out = const - slope * r_norm2
    return float(out) if out.ndim == 0 else out


def decision_threshold(
    alpha: float, h: float, sigma2: float, m: int
) -> tuple[float, float]:
    """Threshold pair for the level-alpha membership test.

    Returns ``(t_alpha, gamma_alpha)``: predict member when ||r||^2 <= t_alpha,
    equivalently when S >= gamma_alpha. The false-positive constraint binds on
    the non-member law, so t_alpha = sigma2 (1 + h) F_m^{-1}(alpha); gamma_alpha
    is the statistic evaluated at that boundary.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    law = residual_law(h, sigma2, m, Hypothesis.NON_MEMBER)
    t_alpha = law.norm2_quantile(alpha)
    gamma_alpha = optimal_mia_statistic(t_alpha, h, sigma2, m)
    return t_alpha, gamma_alpha


def theoretical_tradeoff(h: float, m: int, alpha_grid=None) -> TradeoffCurve:
    """Exact trade-off curve beta(alpha) = 1 - F_m(((1+h)/(1-h)) F_m^{-1}(alpha))."""
    h = _check_h(h, allow_one=False)
    alpha = default_alpha_grid() if alpha_grid is None else np.asarray(alpha_grid, float)
    if h == 0.0:
        beta = 1.0 - alpha  # the two hypotheses coincide: pure chance line
    else:
        ratio = (1.0 + h) / (1.0 - h)
        beta = np.array(
            [1.0 - chi2_cdf(ratio * chi2_quantile(float(a), m), m) for a in alpha]
        )
    return TradeoffCurve(
        alpha_grid=alpha,
        beta=np.clip(beta, 0.0, 1.0),
        h=h,
        m=int(m),
        kind=CurveKind.THEORETICAL,
    )


def self_influence_identity_check(
    fit: LinearFit, data: Dataset, i: int, epsilon: float
) -> np.ndarray:
    """Finite-difference estimate of the self-influence matrix d yhat_i / d y_i.

    Perturbs each response coordinate of sample ``i`` by ``epsilon``, refits
    honestly, and differences the fitted value at x_i. For OLS the result is
    h_ii I_m up to roundoff (fitting is linear in Y), so (1/m) trace recovers
    the leverage.
    """
    if not 0 <= i < data.n:
        raise IndexError(f"sample index {i} out of range for n={data.n}")
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    x_i = data.x[i]
    base = x_i @ fit.theta_hat
    m = data.m
    estimate = np.empty((m, m))
    for c in range(m):
        y_pert = data.y.copy()
        y_pert[i, c] += epsilon
        refit = fit_ols(Dataset(x=data.x, y=y_pert))
        estimate[:, c] = (x_i @ refit.theta_hat - base) / epsilon
    return estimate
