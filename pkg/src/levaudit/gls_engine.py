"""Generalized leverage scores for differentiable models.

A trained model's sensitivity to its own training targets,
GLS_i = (d f(x_i) / d y_i), is computed by implicit differentiation of
the first-order optimality condition: solve (H + lambda I) Z = J_i^T
against the per-sample parameter Jacobian, then contract back through
J_i and the constant mixed loss derivative.  For least squares this
reproduces the hat-matrix diagonal exactly, which is the main oracle
used throughout the tests.

Paths provided:

* matrix-free conjugate gradient against Hessian-vector products
  (optionally restricted to a parameter subset via `LayerMask`, with a
  cached-feature fast operator when the subset is exactly the last
  layer, where the model is linear in the remaining parameters);
* a dense reference path that materializes the restricted Hessian;
* closed forms: binary-logistic scores (weighted hat diagonal) and
  last-layer formulas in feature space for both supported losses;
* probability-space transport through the softmax Jacobian and the
  trace / Frobenius / spectral scalar reductions.

All paths add the same damping so their outputs are directly
comparable.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import diff_models as dm
from .diff_models import DiffModel, LossKind
from .errors import (
    DimensionMismatch,
    FeasibilityGuard,
    IndefiniteCurvature,
    InputFormatError,
    NonConvergence,
    NonOptimalModelWarning,
    NotASimplex,
    RankDeficient,
    SingularHessian,
    SingularWeightedGram,
)
from .linear_gaussian import Dataset

__all__ = [
    "Space",
    "ScalarOp",
    "CgConfig",
    "LayerMask",
    "parse_layer_mask",
    "GlsMatrix",
    "GlsFailure",
    "cg_solve",
    "cg_solve_operator",
    "gls_compute",
    "gls_dense",
    "binary_logistic_gls",
    "gls_last_layer_quadratic",
    "gls_last_layer_crossentropy",
    "scalarize",
]

_DENSE_MAX_P_SUB = 2000
_LAST_LAYER_CE_MAX = 4000
_SINGULAR_REL_EIG = 1e-12


class Space(enum.Enum):
    LOGIT = "logit"
    PROBABILITY = "probability"


class ScalarOp(enum.Enum):
    TRACE = "trace"
    FROBENIUS = "frobenius"
    SPECTRAL = "spectral"


@dataclass(frozen=True)
class CgConfig:
    damping: float = 1e-3
    max_iters: int = 100
    residual_tol: float = 1e-3
    batch_size: int | None = None

    def __post_init__(self):
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.residual_tol <= 0:
            raise ValueError("residual_tol must be > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class LayerMask:
    """Disjoint half-open index ranges selecting a parameter subset."""

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        if not ranges:
            raise ValueError("mask needs at least one range")
        last = 0
        for a, b in ranges:
            if a < 0 or b <= a:
                raise ValueError(f"bad range ({a}, {b})")
            if a < last:
                raise ValueError("ranges must be sorted and disjoint")
            last = b

    @property
    def p_sub(self) -> int:
        return sum(b - a for a, b in self.ranges)

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([np.arange(a, b) for a, b in self.ranges])

    @classmethod
    def full(cls, model: DiffModel) -> "LayerMask":
        return cls(ranges=((0, model.p),))

    @classmethod
    def last_layers(cls, model: DiffModel, k: int) -> "LayerMask":
        n_layers = len(model.layer_ranges)
        if not 1 <= k <= n_layers:
            raise ValueError(f"last:{k} invalid for a {n_layers}-layer model")
        return cls(ranges=((model.layer_ranges[n_layers - k][0], model.p),))

    def validate_for(self, model: DiffModel) -> None:
        if self.ranges[-1][1] > model.p:
            raise ValueError(
                f"mask extends to {self.ranges[-1][1]} but model has p={model.p}"
            )


def parse_layer_mask(text: str, model: DiffModel) -> LayerMask:
    """CLI mask syntax: "full" or "last:K"."""
    if text == "full":
        return LayerMask.full(model)
    if text.startswith("last:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError as exc:
            raise InputFormatError(f"bad layer mask {text!r}") from exc
        try:
            return LayerMask.last_layers(model, k)
        except ValueError as exc:
            raise InputFormatError(str(exc)) from exc
    raise InputFormatError(f"bad layer mask {text!r} (expected 'full' or 'last:K')")


def _spectral_norm(mat: np.ndarray) -> float:
    """Largest singular value by power iteration on mat^T mat."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.size == 0:
        return 0.0
    gram = mat.T @ mat
    v = np.ones(gram.shape[0]) / math.sqrt(gram.shape[0])
    prev = 0.0
    for _ in range(1000):
        w = gram @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - prev) <= 1e-10 * max(1.0, norm):
            break
        prev = norm
    return math.sqrt(float(v @ (gram @ v)))


@dataclass(frozen=True, eq=False)
class GlsMatrix:
    index: int
    matrix: np.ndarray
    space: Space
    trace: float
    frobenius: float
    spectral: float
    cg_iters: int | None = None
    cg_residual: float | None = None
    damping: float | None = None
    converged: bool = True

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatch("gls matrix must be square")
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)
        scale = max(1.0, float(np.abs(matrix).max()))
        if (
            abs(self.trace - float(np.trace(matrix))) > 1e-12 * scale
            or abs(self.frobenius - float(np.linalg.norm(matrix))) > 1e-12 * scale
            or abs(self.spectral - _spectral_norm(matrix)) > 1e-12 * scale
        ):
            raise ValueError("cached reductions do not match the matrix")

    @classmethod
    def from_matrix(cls, index, matrix, space, **kwargs) -> "GlsMatrix":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(
            index=index,
            matrix=matrix,
            space=space,
            trace=float(np.trace(matrix)),
            frobenius=float(np.linalg.norm(matrix)),
            spectral=_spectral_norm(matrix),
            **kwargs,
        )


@dataclass(frozen=True)
class GlsFailure:
    """Per-target failure record; the batch keeps going."""

    index: int
    space: Space
    error: str
    message: str


def scalarize(g: GlsMatrix, op: ScalarOp) -> float:
    if op is ScalarOp.TRACE:
        return float(np.trace(g.matrix))
    if op is ScalarOp.FROBENIUS:
        return float(np.linalg.norm(g.matrix))
    return _spectral_norm(g.matrix)


# ---------------------------------------------------------------------------
# Hessian operators


def _batch_slices(n: int, batch_size: int | None):
    if batch_size is None:
        return [(0, n)]
    return [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


def _last_layer_start(model: DiffModel) -> int:
    return model.layer_ranges[-1][0]


def _is_last_layer_mask(mask: LayerMask, model: DiffModel) -> bool:
    return mask.ranges == ((_last_layer_start(model), model.p),)


def _last_layer_operator(model, loss, data):
    """Restricted-Hessian operator using cached penultimate features.

    The model output is linear in the last layer's parameters, so the
    restricted Hessian is exactly the feature-space Gauss-Newton matrix
    and never needs another pass through the network.
    """
    feats = dm.features(model, data.x)  # (n, q) with bias slot
    f = dm.predict(model, data.x)
    n, m = f.shape
    q = feats.shape[1]
    if loss is LossKind.QUADRATIC:
        def hess_f(t):
            return 2.0 * t
    elif m == 1:
        w = expit(f) * (1.0 - expit(f))

        def hess_f(t):
            return w * t
    else:
        p_hat = dm.softmax(f)

        def hess_f(t):
            return p_hat * t - p_hat * np.einsum("nm,nm->n", p_hat, t)[:, None]

    def as_matrix(v_sub):
        vw = v_sub[: m * (q - 1)].reshape(m, q - 1)
        return np.hstack([vw, v_sub[m * (q - 1) :][:, None]])

    def flatten(mat):
        return np.concatenate([mat[:, : q - 1].ravel(), mat[:, q - 1]])

    def apply(v_sub):
        v_mat = as_matrix(v_sub)
        t = feats @ v_mat.T
        result = hess_f(t).T @ feats / n
        return flatten(result) + model.l2 * v_sub

    return apply


def _masked_hessian_operator(model, loss, data, mask, batch_size=None):
    """Returns v_sub -> (H_sub + model.l2 I) v_sub for the training loss."""
    mask.validate_for(model)
    if _is_last_layer_mask(mask, model):
        return _last_layer_operator(model, loss, data)
    idx = mask.indices
    slices = _batch_slices(data.n, batch_size)
    x, y = data.x, data.y

    def apply(v_sub):
        v = np.zeros(model.p)
        v[idx] = v_sub
        total = np.zeros(model.p)
        for lo, hi in slices:
            total += dm._hvp_sum(model, loss, x[lo:hi], y[lo:hi], v, False)
        return (total / data.n + model.l2 * v)[idx]

    return apply


# ---------------------------------------------------------------------------
# Conjugate gradient


def _cg_column(operator, b, cfg):
    """Solve (operator + damping I) x = b; returns (x, iters, rel_residual)."""
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return x, 0, 0.0
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for it in range(1, cfg.max_iters + 1):
        ap = operator(p) + cfg.damping * p
        p_ap = float(p @ ap)
        if p_ap <= 0.0:
            raise IndefiniteCurvature(
                f"p^T A p = {p_ap:.3e} <= 0; increase damping"
            )
        alpha = rs / p_ap
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        if math.sqrt(rs_new) <= cfg.residual_tol * b_norm:
            return x, it, math.sqrt(rs_new) / b_norm
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, cfg.max_iters, math.sqrt(rs) / b_norm


def cg_solve_operator(operator, jt: np.ndarray, cfg: CgConfig) -> np.ndarray:
    """Solve (operator + damping I) Z = Jt column by column.

    `operator` applies the (restricted) Hessian only; the damping from
    `cfg` is added here.  Raises NonConvergence with the partial Z and
    per-column residuals attached, or IndefiniteCurvature if a
    curvature pairing comes out non-positive.
    """
    z, iters, residuals = _cg_matrix(operator, jt, cfg)
    failed = [r for r in residuals if r > cfg.residual_tol]
    if failed:
        raise NonConvergence(
            f"{len(failed)} of {jt.shape[1]} columns above residual tolerance "
            f"{cfg.residual_tol:g} after {cfg.max_iters} iterations",
            residuals=tuple(residuals),
            partial=z,
            iterations=max(iters),
        )
    return z


def _cg_matrix(operator, jt, cfg):
    jt = np.asarray(jt, dtype=np.float64)
    if jt.ndim != 2:
        raise DimensionMismatch("Jt must be a p_sub x m matrix")
    if not np.all(np.isfinite(jt)):
        raise ValueError("Jt columns must be finite")
    z = np.empty_like(jt)
    iters, residuals = [], []
    for col in range(jt.shape[1]):
        x, it, res = _cg_column(operator, jt[:, col], cfg)
        z[:, col] = x
        iters.append(it)
        residuals.append(res)
    return z, iters, residuals


def cg_solve(
    model: DiffModel,
    loss: LossKind,
    data: Dataset,
    jt: np.ndarray,
    cfg: CgConfig,
    mask: LayerMask | None = None,
) -> np.ndarray:
    """Damped inverse-Hessian product against the columns of Jt."""
    mask = LayerMask.full(model) if mask is None else mask
    jt = np.asarray(jt, dtype=np.float64)
    if jt.shape[0] != mask.p_sub:
        raise DimensionMismatch(
            f"Jt has {jt.shape[0]} rows, mask selects p_sub={mask.p_sub}"
        )
    operator = _masked_hessian_operator(model, loss, data, mask, cfg.batch_size)
    return cg_solve_operator(operator, jt, cfg)


# ---------------------------------------------------------------------------
# GLS drivers


def _m_matrix(loss: LossKind, m: int, n: int) -> np.ndarray:
    # Sign and 1/n bookkeeping in exactly one place: quadratic gives
    # +(2/n) I_m, cross-entropy +(1/n) I_m.
    return -(1.0 / n) * dm.mixed_second_derivative(loss, m)


def _warn_if_not_optimal(model: DiffModel) -> None:
    if model.grad_norm is None or model.train_tol is None:
        warnings.warn(
            "model carries no training metadata; scores assume optimality",
            NonOptimalModelWarning,
        )
    elif model.grad_norm > 10.0 * model.train_tol:
        warnings.warn(
            f"gradient norm {model.grad_norm:.3e} exceeds 10x the training "
            f"tolerance {model.train_tol:.3e}; scores may be unreliable",
            NonOptimalModelWarning,
        )


def _check_space(space: Space, loss: LossKind) -> None:
    if space is Space.PROBABILITY and loss is not LossKind.CROSS_ENTROPY:
        raise ValueError("probability space requires a cross-entropy loss")


def _to_probability_space(matrix: np.ndarray, f_i: np.ndarray) -> np.ndarray:
    if matrix.shape[0] == 1:
        s = float(expit(f_i[0]))
        return s * (1.0 - s) * matrix
    return dm.softmax_jacobian(dm.softmax(f_i)) @ matrix


def _check_targets_in_range(targets, n: int) -> list[int]:
    targets = [int(t) for t in targets]
    for t in targets:
        if not 0 <= t < n:
            raise ValueError(f"target index {t} out of range for n={n}")
    return targets


def gls_compute(
    model: DiffModel,
    loss: LossKind,
    data: Dataset,
    targets,
    cfg: CgConfig | None = None,
    mask: LayerMask | None = None,
    space: Space = Space.LOGIT,
) -> list[GlsMatrix | GlsFailure]:
    """Matrix-free GLS for each target index.

    Per-target failures (CG non-convergence, indefinite curvature) are
    recorded in the returned list without aborting the batch; a
    non-converged solve still yields its best-effort matrix with
    `converged=False`.
    """
    cfg = CgConfig() if cfg is None else cfg
    mask = LayerMask.full(model) if mask is None else mask
    _check_space(space, loss)
    _warn_if_not_optimal(model)
    targets = _check_targets_in_range(targets, data.n)
    mask.validate_for(model)
    operator = _masked_hessian_operator(model, loss, data, mask, cfg.batch_size)
    idx = mask.indices
    out: list[GlsMatrix | GlsFailure] = []
    for i in targets:
        jac = dm.param_jacobian(model, data.x[i])[:, idx]
        m_i = _m_matrix(loss, model.m, data.n)
        try:
            z, iters, residuals = _cg_matrix(operator, jac.T, cfg)
        except IndefiniteCurvature as exc:
            out.append(
                GlsFailure(
                    index=i,
                    space=space,
                    error="indefinite_curvature",
                    message=str(exc),
                )
            )
            continue
        matrix = jac @ z @ m_i
        if space is Space.PROBABILITY:
            matrix = _to_probability_space(matrix, dm.predict(model, data.x[i]))
        out.append(
            GlsMatrix.from_matrix(
                i,
                matrix,
                space,
                cg_iters=max(iters),
                cg_residual=max(residuals),
                damping=cfg.damping,
                converged=all(r <= cfg.residual_tol for r in residuals),
            )
        )
    return out


def _dense_hessian(model, loss, data, mask) -> np.ndarray:
    operator = _masked_hessian_operator(model, loss, data, mask)
    p_sub = mask.p_sub
    h = np.empty((p_sub, p_sub))
    eye = np.eye(p_sub)
    for j in range(p_sub):
        h[:, j] = operator(eye[:, j])
    return 0.5 * (h + h.T)


def gls_dense(
    model: DiffModel,
    loss: LossKind,
    data: Dataset,
    targets,
    mask: LayerMask | None = None,
    space: Space = Space.LOGIT,
    damping: float = 0.0,
) -> list[GlsMatrix]:
    """Reference path: materialize the restricted Hessian and factorize."""
    mask = LayerMask.full(model) if mask is None else mask
    _check_space(space, loss)
    targets = _check_targets_in_range(targets, data.n)
    mask.validate_for(model)
    if mask.p_sub > _DENSE_MAX_P_SUB:
        raise FeasibilityGuard(
            f"dense path limited to p_sub <= {_DENSE_MAX_P_SUB}, got {mask.p_sub}"
        )
    h = _dense_hessian(model, loss, data, mask) + damping * np.eye(mask.p_sub)
    eigvals, eigvecs = np.linalg.eigh(h)
    if np.min(np.abs(eigvals)) <= _SINGULAR_REL_EIG * np.max(np.abs(eigvals)):
        raise SingularHessian(
            "restricted Hessian is numerically singular; increase damping"
        )
    idx = mask.indices
    out = []
    for i in targets:
        jac = dm.param_jacobian(model, data.x[i])[:, idx]
        m_i = _m_matrix(loss, model.m, data.n)
        z = eigvecs @ ((eigvecs.T @ jac.T) / eigvals[:, None])
        matrix = jac @ z @ m_i
        if space is Space.PROBABILITY:
            matrix = _to_probability_space(matrix, dm.predict(model, data.x[i]))
        out.append(GlsMatrix.from_matrix(i, matrix, space, damping=damping))
    return out


# ---------------------------------------------------------------------------
# Closed forms


def binary_logistic_gls(model: DiffModel, data: Dataset) -> np.ndarray:
    """Sensitivity of each fitted probability to its own label.

    For a converged binary logistic fit this is the weighted-hat
    diagonal w_i x_i~^T (X~^T W X~)^{-1} x_i~ with w_i = p_i (1 - p_i).
    """
    if model.m != 1 or len(model.widths) != 2:
        raise DimensionMismatch("binary closed form needs a single-logit model")
    f = dm.predict(model, data.x)[:, 0]
    p = expit(f)
    w = p * (1.0 - p)
    aug = np.hstack([data.x, np.ones((data.n, 1))])
    gram = aug.T @ (w[:, None] * aug)
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[-1] <= 0 or eigvals[0] <= _SINGULAR_REL_EIG * eigvals[-1]:
        raise SingularWeightedGram(
            "weighted Gram matrix is singular (weights degenerate)"
        )
    solved = np.linalg.solve(gram, aug.T)
    return w * np.einsum("nd,dn->n", aug, solved)


def gls_last_layer_quadratic(
    features: np.ndarray, targets, damping: float = 0.0
) -> np.ndarray:
    """Leverage of the augmented feature rows: g~^T (G~^T G~)^{-1} g~.

    With damping d the system matches the engine's damped solve on the
    last layer: (G~^T G~ + n d / 2 I).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DimensionMismatch("features must be an n x d_feat matrix")
    n = feats.shape[0]
    targets = _check_targets_in_range(targets, n)
    aug = np.hstack([feats, np.ones((n, 1))])
    gram = aug.T @ aug + (n * damping / 2.0) * np.eye(aug.shape[1])
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[-1] <= 0 or eigvals[0] <= _SINGULAR_REL_EIG * eigvals[-1]:
        raise RankDeficient(
            "augmented feature matrix is rank deficient",
            condition_number=float(eigvals[-1] / max(eigvals[0], 1e-300)),
        )
    rows = aug[targets]
    solved = np.linalg.solve(gram, rows.T)
    return np.einsum("td,dt->t", rows, solved)


def gls_last_layer_crossentropy(
    features: np.ndarray,
    probs: np.ndarray,
    targets,
    damping: float = 1e-3,
) -> list[GlsMatrix]:
    """Block closed form for a cross-entropy last layer.

    Assembles H with blocks H[k,l] = (1/n) sum_j (S_j)_{kl} g~_j g~_j^T
    where S_j is the softmax Jacobian at row j, inverts the damped
    block matrix once, and reads every target's m x m score matrix off
    the inverse.  The softmax direction of ones is a structural null
    space, so an undamped call raises SingularHessian.
    """
    feats = np.asarray(features, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if feats.ndim != 2 or probs.ndim != 2 or feats.shape[0] != probs.shape[0]:
        raise DimensionMismatch("features and probs must share their row count")
    n, m = probs.shape
    if np.any(probs < -1e-12) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise NotASimplex("probs rows must lie on the simplex")
    targets = _check_targets_in_range(targets, n)
    aug = np.hstack([feats, np.ones((n, 1))])
    q = aug.shape[1]
    if m * q > _LAST_LAYER_CE_MAX:
        raise FeasibilityGuard(
            f"block system of size {m * q} exceeds {_LAST_LAYER_CE_MAX}"
        )
    s = probs[:, :, None] * np.eye(m)[None] - np.einsum("nk,nl->nkl", probs, probs)
    blocks = np.einsum("nkl,nq,nr->kqlr", s, aug, aug) / n
    h = blocks.reshape(m * q, m * q) + damping * np.eye(m * q)
    eigvals = np.linalg.eigvalsh(h)
    if eigvals[0] <= _SINGULAR_REL_EIG * max(abs(eigvals[-1]), 1e-300):
        raise SingularHessian(
            "block Hessian is singular (softmax null direction); use damping > 0"
        )
    h_inv = np.linalg.inv(h).reshape(m, q, m, q)
    out = []
    for i in targets:
        g = aug[i]
        matrix = np.einsum("q,uqvr,r->uv", g, h_inv, g) / n
        out.append(
            GlsMatrix.from_matrix(i, matrix, Space.LOGIT, damping=damping)
        )
    return out
