"""Twice-differentiable models and losses with exact derivative oracles.

Every model is a chain of affine layers with an optional smooth
activation between them; `Linear` and `Logistic` are the single-layer
case (logistic models emit logits, probabilities come from `softmax`).
Parameters live in one flat vector, laid out layer by layer as the
weight matrix in row-major order followed by the bias.

The oracles exposed here are the ones implicit-differentiation needs:
forward predictions, per-sample parameter Jacobians, mean-loss
gradients, and Hessian-vector products computed with Pearlmutter's
forward-over-reverse recursion (exact, with an optional Gauss-Newton
variant that drops the activation-curvature terms).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import io as _io
from .errors import DimensionMismatch, NonConvergence, NotASimplex
from .linear_gaussian import Dataset

__all__ = [
    "ModelKind",
    "Activation",
    "LossKind",
    "Optimizer",
    "DiffModel",
    "TrainConfig",
    "init_model",
    "predict",
    "features",
    "param_jacobian",
    "softmax",
    "softmax_jacobian",
    "per_sample_loss",
    "mixed_second_derivative",
    "objective",
    "gradient",
    "hvp",
    "train",
    "save_model",
    "load_model",
]

_SOFTPLUS_BETA = 10.0


class ModelKind(enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    MLP = "mlp"


class Activation(enum.Enum):
    TANH = "tanh"
    SOFTPLUS = "softplus"  # smoothed relu, beta = 10


class LossKind(enum.Enum):
    QUADRATIC = "quadratic"
    CROSS_ENTROPY = "cross_entropy"


class Optimizer(enum.Enum):
    GRADIENT_DESCENT = "gradient_descent"
    QUASI_NEWTON = "quasi_newton"


def param_count(widths) -> int:
    return sum(o * i + o for i, o in zip(widths[:-1], widths[1:]))


def layer_ranges(widths) -> tuple[tuple[int, int], ...]:
    """Half-open flat-theta ranges, one per layer (weights then bias)."""
    out, start = [], 0
    for i, o in zip(widths[:-1], widths[1:]):
        stop = start + o * i + o
        out.append((start, stop))
        start = stop
    return tuple(out)


@dataclass(frozen=True, eq=False)
class DiffModel:
    kind: ModelKind
    widths: tuple[int, ...]
    theta: np.ndarray
    activation: Activation = Activation.TANH
    l2: float = 0.0
    grad_norm: float | None = None
    train_tol: float | None = None
    seed: int | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"widths must be >= 2 positive entries, got {widths}")
        if self.kind in (ModelKind.LINEAR, ModelKind.LOGISTIC) and len(widths) != 2:
            raise ValueError(f"{self.kind.value} models are single-layer")
        if self.kind is ModelKind.MLP and len(widths) < 3:
            raise ValueError("mlp needs at least one hidden layer")
        theta = np.asarray(self.theta, dtype=np.float64).ravel()
        if theta.size != param_count(widths):
            raise DimensionMismatch(
                f"theta has {theta.size} entries, architecture needs "
                f"{param_count(widths)}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")

    @property
    def p(self) -> int:
        return self.theta.size

    @property
    def d(self) -> int:
        return self.widths[0]

    @property
    def m(self) -> int:
        return self.widths[-1]

    @property
    def layer_ranges(self) -> tuple[tuple[int, int], ...]:
        return layer_ranges(self.widths)

    def with_theta(self, theta: np.ndarray) -> "DiffModel":
        return replace(self, theta=theta)


def init_model(
    kind: ModelKind,
    widths,
    *,
    seed: int = 0,
    activation: Activation = Activation.TANH,
    l2: float = 0.0,
) -> DiffModel:
    """Fan-in-scaled uniform initialization, deterministic in `seed`."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_out * fan_in + fan_out))
    return DiffModel(
        kind=kind,
        widths=tuple(widths),
        theta=np.concatenate(parts),
        activation=activation,
        l2=l2,
        seed=seed,
    )


def _unpack(model: DiffModel) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    theta = model.theta
    for (start, stop), (i, o) in zip(
        model.layer_ranges, zip(model.widths[:-1], model.widths[1:])
    ):
        w = theta[start : start + o * i].reshape(o, i)
        b = theta[start + o * i : stop]
        layers.append((w, b))
    return layers


def _act(activation: Activation, z: np.ndarray) -> np.ndarray:
    if activation is Activation.TANH:
        return np.tanh(z)
    return np.logaddexp(0.0, _SOFTPLUS_BETA * z) / _SOFTPLUS_BETA


def _act_derivs(activation, z, a):
    """(phi', phi'') evaluated from the pre-activation and its value."""
    if activation is Activation.TANH:
        d1 = 1.0 - a * a
        return d1, -2.0 * a * d1
    s = expit(_SOFTPLUS_BETA * z)
    return s, _SOFTPLUS_BETA * s * (1.0 - s)


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionMismatch(f"input has shape {x.shape}, expected (*, {d})")
    return x, single


def _forward(model: DiffModel, x: np.ndarray):
    """All activations [a_0 .. a_L] and pre-activations [z_1 .. z_L]."""
    acts, zs = [x], []
    a = x
    layers = _unpack(model)
    for k, (w, b) in enumerate(layers):
        z = a @ w.T + b
        zs.append(z)
        a = _act(model.activation, z) if k < len(layers) - 1 else z
        acts.append(a)
    return acts, zs


def predict(model: DiffModel, x) -> np.ndarray:
    """Forward pass; logits for logistic/classification models."""
    xb, single = _as_batch(x, model.d)
    out = _forward(model, xb)[0][-1]
    return out[0] if single else out


def features(model: DiffModel, x) -> np.ndarray:
    """Penultimate representation with a trailing 1 for the bias slot."""
    xb, single = _as_batch(x, model.d)
    penultimate = _forward(model, xb)[0][-2]
    out = np.hstack([penultimate, np.ones((xb.shape[0], 1))])
    return out[0] if single else out


def _batch_jacobian(model: DiffModel, x: np.ndarray) -> np.ndarray:
    """Per-sample Jacobians d f / d theta, shape (n, m, p)."""
    acts, zs = _forward(model, x)
    layers = _unpack(model)
    n, m = x.shape[0], model.m
    jac = np.empty((n, m, model.p))
    g = np.broadcast_to(np.eye(m), (n, m, m)).copy()
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        start, stop = model.layer_ranges[k]
        o, i = w.shape
        a_prev = acts[k]
        jac[:, :, start : start + o * i] = np.einsum(
            "nmo,ni->nmoi", g, a_prev
        ).reshape(n, m, o * i)
        jac[:, :, start + o * i : stop] = g
        if k > 0:
            d1, _ = _act_derivs(model.activation, zs[k - 1], acts[k])
            g = np.einsum("nmo,oi->nmi", g, w) * d1[:, None, :]
    return jac


def param_jacobian(model: DiffModel, x) -> np.ndarray:
    """Jacobian of the outputs with respect to the flat parameters.

    Shape (m, p) for a single input, (n, m, p) for a batch.
    """
    xb, single = _as_batch(x, model.d)
    jac = _batch_jacobian(model, xb)
    return jac[0] if single else jac


# ---------------------------------------------------------------------------
# Losses.  All per-sample quantities; the mean reduction happens in the
# public objective/gradient/hvp entry points.


def softmax(logits) -> np.ndarray:
    f = np.asarray(logits, dtype=np.float64)
    shifted = f - f.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian(p_hat) -> np.ndarray:
    """diag(p) - p p^T; symmetric with zero row sums."""
    p = np.asarray(p_hat, dtype=np.float64)
    if p.ndim != 1:
        raise DimensionMismatch("p_hat must be a vector")
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise NotASimplex(f"not a probability vector: sum={p.sum()!r}")
    return np.diag(p) - np.outer(p, p)


def _check_targets(loss: LossKind, y: np.ndarray) -> None:
    if loss is LossKind.QUADRATIC:
        return
    if y.shape[1] == 1:
        if np.any(y < 0.0) or np.any(y > 1.0):
            raise ValueError("binary cross-entropy targets must lie in [0, 1]")
        return
    if np.any(y < -1e-12) or np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("cross-entropy targets must be rows on the simplex")


def per_sample_loss(loss: LossKind, f, y) -> np.ndarray:
    """Vector of per-sample losses (no 1/n, no regularizer)."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if f.shape != y.shape:
        raise DimensionMismatch(f"predictions {f.shape} vs targets {y.shape}")
    _check_targets(loss, y)
    if loss is LossKind.QUADRATIC:
        return np.einsum("nm,nm->n", f - y, f - y)
    if f.shape[1] == 1:
        return (np.logaddexp(0.0, f) - y * f)[:, 0]
    shifted = f - f.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + f.max(axis=1)
    return lse - np.einsum("nm,nm->n", y, f)


def _loss_grad_f(loss: LossKind, f, y) -> np.ndarray:
    if loss is LossKind.QUADRATIC:
        return 2.0 * (f - y)
    if f.shape[1] == 1:
        return expit(f) - y
    return softmax(f) - y


def _loss_hess_f_vec(loss: LossKind, f, t) -> np.ndarray:
    """Per-sample prediction-space Hessian applied to rows of t."""
    if loss is LossKind.QUADRATIC:
        return 2.0 * t
    if f.shape[1] == 1:
        s = expit(f)
        return s * (1.0 - s) * t
    p = softmax(f)
    return p * t - p * np.einsum("nm,nm->n", p, t)[:, None]


def mixed_second_derivative(loss: LossKind, m: int) -> np.ndarray:
    """The constant matrix of second derivatives of the per-sample loss
    taken once in the target and once in the prediction."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if loss is LossKind.QUADRATIC:
        return -2.0 * np.eye(m)
    return -1.0 * np.eye(m)


def _resolve_l2(model: DiffModel, l2) -> float:
    return float(model.l2 if l2 is None else l2)


def objective(model: DiffModel, loss: LossKind, data: Dataset, l2=None) -> float:
    """Mean per-sample loss plus (l2/2)||theta||^2."""
    rho = _resolve_l2(model, l2)
    f = predict(model, data.x)
    base = float(per_sample_loss(loss, f, data.y).mean())
    return base + 0.5 * rho * float(model.theta @ model.theta)


def gradient(model: DiffModel, loss: LossKind, data: Dataset, l2=None) -> np.ndarray:
    """Gradient of `objective` in the flat parameters."""
    rho = _resolve_l2(model, l2)
    acts, zs = _forward(model, data.x)
    layers = _unpack(model)
    _check_targets(loss, data.y)
    delta = _loss_grad_f(loss, acts[-1], data.y)
    grad = np.empty(model.p)
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        start, stop = model.layer_ranges[k]
        o, i = w.shape
        grad[start : start + o * i] = (delta.T @ acts[k]).ravel()
        grad[start + o * i : stop] = delta.sum(axis=0)
        if k > 0:
            d1, _ = _act_derivs(model.activation, zs[k - 1], acts[k])
            delta = (delta @ w) * d1
    return grad / data.n + rho * model.theta


def _hvp_sum(
    model: DiffModel,
    loss: LossKind,
    x: np.ndarray,
    y: np.ndarray,
    v: np.ndarray,
    gauss_newton: bool,
) -> np.ndarray:
    """Unnormalized sum over the batch of per-sample Hessians applied to v.

    Forward-over-reverse: propagate directional derivatives (R-values)
    through the forward pass, then differentiate the backward pass.
    """
    layers = _unpack(model)
    vs = [
        (v[start : start + w.size].reshape(w.shape), v[start + w.size : stop])
        for (start, stop), (w, _) in zip(model.layer_ranges, layers)
    ]
    acts, zs = _forward(model, x)
    r_acts, r_zs = [np.zeros_like(x)], []
    for k, ((w, _), (vw, vb)) in enumerate(zip(layers, vs)):
        rz = r_acts[k] @ w.T + acts[k] @ vw.T + vb
        r_zs.append(rz)
        if k < len(layers) - 1:
            d1, _ = _act_derivs(model.activation, zs[k], acts[k + 1])
            r_acts.append(d1 * rz)
        else:
            r_acts.append(rz)

    f = acts[-1]
    delta = np.zeros_like(f) if gauss_newton else _loss_grad_f(loss, f, y)
    r_delta = _loss_hess_f_vec(loss, f, r_zs[-1])
    out = np.empty(model.p)
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        vw, _ = vs[k]
        start, stop = model.layer_ranges[k]
        o, i = w.shape
        out[start : start + o * i] = (r_delta.T @ acts[k] + delta.T @ r_acts[k]).ravel()
        out[start + o * i : stop] = r_delta.sum(axis=0)
        if k > 0:
            d1, d2 = _act_derivs(model.activation, zs[k - 1], acts[k])
            back = delta @ w
            r_back = r_delta @ w + delta @ vw
            delta = back * d1
            r_delta = r_back * d1 + back * d2 * r_zs[k - 1]
    return out


def hvp(
    model: DiffModel,
    loss: LossKind,
    data: Dataset,
    v: np.ndarray,
    l2: float = 0.0,
    *,
    gauss_newton: bool = False,
) -> np.ndarray:
    """(H + l2 I) v where H is the Hessian of the mean per-sample loss.

    `gauss_newton=True` drops the terms involving the loss gradient
    (exactly the activation-curvature contributions), yielding the PSD
    generalized Gauss-Newton matrix instead; the two coincide for models
    that are linear in theta.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != model.p:
        raise DimensionMismatch(f"v has {v.size} entries, model has p={model.p}")
    _check_targets(loss, data.y)
    total = _hvp_sum(model, loss, data.x, data.y, v, gauss_newton)
    return total / data.n + l2 * v


@dataclass(frozen=True)
class TrainConfig:
    optimizer: Optimizer = Optimizer.QUASI_NEWTON
    max_epochs: int = 500
    tolerance: float = 1e-8
    l2: float | None = None  # None -> 0 for linear, 1e-3 otherwise
    seed: int = 0

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.l2 is not None and self.l2 < 0:
            raise ValueError("l2 must be >= 0")


def _default_l2(kind: ModelKind) -> float:
    return 0.0 if kind is ModelKind.LINEAR else 1e-3


_NEWTON_POLISH_MAX_P = 2000


def _newton_polish(model, loss, data, rho, theta, tol, log):
    """Drive the gradient norm down with damped dense-Newton steps."""
    mdl = model.with_theta(theta)
    g = gradient(mdl, loss, data, l2=rho)
    norm = float(np.linalg.norm(g))
    if norm <= tol or theta.size > _NEWTON_POLISH_MAX_P:
        return theta, norm
    eye = np.eye(theta.size)
    for _ in range(60):
        if norm <= tol:
            break
        h = np.column_stack(
            [hvp(mdl, loss, data, eye[:, j], l2=rho) for j in range(theta.size)]
        )
        mu = 0.0
        improved = False
        for _ in range(12):
            try:
                step = np.linalg.solve(h + mu * eye, -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                cand = theta + step
                cand_model = mdl.with_theta(cand)
                g_new = gradient(cand_model, loss, data, l2=rho)
                norm_new = float(np.linalg.norm(g_new))
                if norm_new < norm:
                    theta, mdl, g, norm = cand, cand_model, g_new, norm_new
                    improved = True
                    break
            mu = 1e-8 if mu == 0.0 else mu * 10.0
        log(norm)
        if not improved:
            break
    return theta, norm


def train(
    model: DiffModel,
    loss: LossKind,
    data: Dataset,
    cfg: TrainConfig,
    log_path=None,
) -> DiffModel:
    """Full-batch deterministic training to a gradient-norm tolerance.

    Returns a new model carrying the achieved gradient norm and the
    regularization strength used (so downstream curvature queries can
    include it).  Raises NonConvergence with the best model attached
    when the tolerance is not reached.
    """
    if data.d != model.d:
        raise DimensionMismatch(f"data has d={data.d}, model expects {model.d}")
    if data.y.shape[1] != model.m:
        raise DimensionMismatch(f"targets have m={data.y.shape[1]}, model {model.m}")
    _check_targets(loss, data.y)
    rho = _default_l2(model.kind) if cfg.l2 is None else float(cfg.l2)
    records = []

    def value_and_grad(theta):
        mdl = model.with_theta(theta)
        return (
            objective(mdl, loss, data, l2=rho),
            gradient(mdl, loss, data, l2=rho),
        )

    theta = model.theta.copy()
    best_theta, best_norm = theta, float(np.linalg.norm(value_and_grad(theta)[1]))

    def track(theta, norm, epoch, value):
        nonlocal best_theta, best_norm
        if norm < best_norm:
            best_theta, best_norm = theta.copy(), norm
        records.append({"epoch": epoch, "loss": value, "grad_norm": norm})

    if cfg.optimizer is Optimizer.GRADIENT_DESCENT:
        step = 1.0
        value, grad = value_and_grad(theta)
        for epoch in range(cfg.max_epochs):
            norm = float(np.linalg.norm(grad))
            track(theta, norm, epoch, value)
            if norm <= cfg.tolerance:
                break
            # Armijo backtracking on the regularized objective
            step = min(step * 2.0, 1e6)
            while step > 1e-20:
                cand = theta - step * grad
                cand_value = objective(model.with_theta(cand), loss, data, l2=rho)
                if cand_value <= value - 1e-4 * step * norm * norm:
                    break
                step *= 0.5
            theta = theta - step * grad
            value, grad = value_and_grad(theta)
        final_norm = float(np.linalg.norm(grad))
        track(theta, final_norm, cfg.max_epochs, value)
    else:
        from scipy.optimize import minimize

        state = {"epoch": 0}

        def callback(tk):
            value, grad = value_and_grad(tk)
            track(tk, float(np.linalg.norm(grad)), state["epoch"], value)
            state["epoch"] += 1

        result = minimize(
            value_and_grad,
            theta,
            jac=True,
            method="L-BFGS-B",
            callback=callback,
            options={
                "maxiter": cfg.max_epochs,
                "gtol": cfg.tolerance / (10.0 * math.sqrt(model.p)),
                "ftol": 1e-18,
            },
        )
        value, grad = value_and_grad(result.x)
        track(result.x, float(np.linalg.norm(grad)), state["epoch"], value)
        theta, norm = _newton_polish(
            model,
            loss,
            data,
            rho,
            best_theta,
            cfg.tolerance,
            lambda nn: records.append(
                {"epoch": state["epoch"], "loss": None, "grad_norm": nn}
            ),
        )
        track(
            theta,
            norm,
            state["epoch"] + 1,
            objective(model.with_theta(theta), loss, data, l2=rho),
        )

    if log_path is not None:
        _io.dump_json_lines(log_path, records)

    trained = replace(
        model,
        theta=best_theta,
        l2=rho,
        grad_norm=best_norm,
        train_tol=cfg.tolerance,
    )
    if best_norm > cfg.tolerance:
        raise NonConvergence(
            f"gradient norm {best_norm:.3e} above tolerance {cfg.tolerance:.3e}",
            best_norm=best_norm,
            partial=trained,
        )
    return trained


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(path, model: DiffModel, loss: LossKind) -> None:
    header = {
        "kind": model.kind.value,
        "widths": list(model.widths),
        "seed": model.seed,
        "loss": loss.value,
        "activation": model.activation.value,
        "l2": model.l2,
        "grad_norm": model.grad_norm,
        "train_tol": model.train_tol,
    }
    _io.write_checkpoint(path, header, model.theta)


def load_model(path) -> tuple[DiffModel, LossKind]:
    header, theta = _io.read_checkpoint(path)
    model = DiffModel(
        kind=ModelKind(header["kind"]),
        widths=tuple(header["widths"]),
        theta=theta,
        activation=Activation(header.get("activation", "tanh")),
        l2=float(header.get("l2", 0.0)),
        grad_norm=header.get("grad_norm"),
        train_tol=header.get("train_tol"),
        seed=header.get("seed"),
    )
    return model, LossKind(header["loss"])
