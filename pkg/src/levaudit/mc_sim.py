"""Monte-Carlo validation of the residual-norm membership game.

Simulates the fixed-design model y = X @ theta_star + E repeatedly,
refits least squares each trial, and records the squared residual norm
of one target row both as a training member and against a freshly drawn
response at the same inputs.  The resulting samples feed empirical
trade-off curves and distributional checks against the closed-form
chi-square laws.

All randomness flows through counter-based streams with a fixed
per-trial block layout, so results are bit-identical for a given seed
no matter how trials are chunked or scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch
from .linear_gaussian import Dataset, GenerativeConfig, TradeoffCurve
from .rng import block_size, normals, stream_key

__all__ = [
    "SimConfig",
    "EmpiricalCurve",
    "simulate_residual_pairs",
    "empirical_tradeoff",
    "sup_deviation",
    "ks_statistic",
    "ks_critical",
]

_STREAM_NAME = "mc-sim-trials"


@dataclass(frozen=True)
class SimConfig:
    """Inputs for one simulation run; only the design of `data` is used."""

    data: Dataset
    gen: GenerativeConfig
    trials: int
    target_index: int
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0 <= self.target_index < self.data.n:
            raise ValueError(
                f"target_index {self.target_index} out of range for n={self.data.n}"
            )
        theta = np.asarray(self.gen.theta_star)
        if theta.shape[0] != self.data.d:
            raise ValueError(
                f"theta_star has {theta.shape[0]} rows, design has d={self.data.d}"
            )


@dataclass(frozen=True, eq=False)
class EmpiricalCurve:
    """Empirical trade-off samples; beta is raw (not forced monotone)."""

    alpha: np.ndarray
    beta: np.ndarray
    trials: int
    h_used: float = field(default=math.nan)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha.flags.writeable = False
        beta.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        if alpha.shape != beta.shape or alpha.ndim != 1:
            raise ValueError("alpha and beta must be equal-length vectors")
        for name, v in (("alpha", alpha), ("beta", beta)):
            if np.any(v < 0.0) or np.any(v > 1.0):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    def isotonic_beta(self) -> np.ndarray:
        """Running minimum over increasing alpha, for plotting only."""
        return np.minimum.accumulate(self.beta)


def _trial_layout(n: int, m: int) -> int:
    # One aligned block per trial: n*m doubles for the noise matrix E,
    # then m doubles for the fresh response noise at the target row.
    return block_size(n * m + m)


def simulate_residual_pairs(
    cfg: SimConfig, chunk: int = 2048
) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial squared residual norms for the target row.

    Each trial draws E, fits least squares to (X, X @ theta_star + E),
    and records ``||r_i||^2`` for the training row i (member) and
    ``||y_tilde_i - x_i @ theta_hat||^2`` for an independent response at
    the same inputs (non-member).
    """
    x = cfg.data.x
    n, d = x.shape
    theta_star = np.asarray(cfg.gen.theta_star, dtype=np.float64)
    m = theta_star.shape[1]
    i = cfg.target_index
    scale = math.sqrt(cfg.gen.sigma2)
    key = stream_key(cfg.seed, _STREAM_NAME)
    stride = _trial_layout(n, m)

    # The least-squares fit depends on the design only through an
    # orthonormal basis of its column space; fitted values are U (U^T y).
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    mean_i = x[i] @ theta_star

    member = np.empty(cfg.trials)
    non_member = np.empty(cfg.trials)
    for lo in range(0, cfg.trials, chunk):
        hi = min(lo + chunk, cfg.trials)
        z = normals(key, (hi - lo) * stride, offset=lo * stride)
        z = z.reshape(hi - lo, stride)
        noise = scale * z[:, : n * m].reshape(hi - lo, n, m)
        eps_fresh = scale * z[:, n * m : n * m + m]

        y = x @ theta_star + noise
        fitted = np.einsum("nd,tdm->tnm", u, np.einsum("nd,tnm->tdm", u, y))
        member[lo:hi] = np.einsum(
            "tm,tm->t", y[:, i, :] - fitted[:, i, :], y[:, i, :] - fitted[:, i, :]
        )
        fresh = mean_i + eps_fresh - fitted[:, i, :]
        non_member[lo:hi] = np.einsum("tm,tm->t", fresh, fresh)
    return member, non_member


def empirical_tradeoff(
    member_norms: np.ndarray,
    nonmember_norms: np.ndarray,
    alpha_grid: np.ndarray,
    h_used: float = math.nan,
) -> EmpiricalCurve:
    """Empirical beta(alpha) for the rule "predict member when norm <= t".

    The threshold at level alpha is the empirical alpha-quantile of the
    non-member norms; beta is the fraction of member norms strictly
    above it (ties at the threshold count as detected members).
    """
    member = np.sort(np.asarray(member_norms, dtype=np.float64))
    non = np.sort(np.asarray(nonmember_norms, dtype=np.float64))
    alpha = np.asarray(alpha_grid, dtype=np.float64)
    if member.size == 0 or non.size == 0:
        raise ValueError("need at least one member and one non-member sample")
    ranks = np.ceil(alpha * non.size).astype(np.int64)
    ranks = np.clip(ranks, 1, non.size)
    thresholds = non[ranks - 1]
    above = member.size - np.searchsorted(member, thresholds, side="right")
    return EmpiricalCurve(
        alpha=alpha,
        beta=above / member.size,
        trials=member.size,
        h_used=h_used,
    )


def sup_deviation(emp: EmpiricalCurve, theory: TradeoffCurve) -> float:
    """Max pointwise |beta_emp - beta_theory| over a shared alpha grid."""
    if emp.alpha.shape != theory.alpha_grid.shape or not np.array_equal(
        emp.alpha, theory.alpha_grid
    ):
        raise GridMismatch("curves were evaluated on different alpha grids")
    return float(np.max(np.abs(emp.beta - theory.beta)))


def ks_statistic(samples: np.ndarray, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance to a continuous CDF.

    `cdf` may be vectorized or scalar-only; scalar callables are applied
    elementwise.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    if x.size == 0:
        raise ValueError("need at least one sample")
    try:
        f = np.asarray(cdf(x), dtype=np.float64)
        if f.shape != x.shape:
            raise TypeError
    except (TypeError, ValueError):
        f = np.asarray([cdf(v) for v in x], dtype=np.float64)
    grid = np.arange(1, x.size + 1) / x.size
    return float(max(np.max(grid - f), np.max(f - (grid - 1.0 / x.size))))


def ks_critical(n: int, significance: float = 1e-3) -> float:
    """Asymptotic two-sided KS rejection threshold sqrt(ln(2/a) / 2n)."""
    if not 0.0 < significance < 1.0:
        raise ValueError("significance must lie in (0, 1)")
    return math.sqrt(math.log(2.0 / significance) / (2.0 * n))
