"""Shadow-model membership attacks and their alignment with self-influence.

The pipeline mirrors the black-box auditing recipe: train many shadow
models on random subsets, fit per-sample Gaussians to each sample's loss
under in-subset and out-of-subset shadows, and score a target model's
loss by the log-likelihood ratio of the two fits.  Rank correlation
between those attack scores and leverage-style sensitivity scores is the
quantity of interest; trade-off curves for high- vs low-sensitivity
sample groups visualize the same alignment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import diff_models as dm
from . import gls_engine as ge
from .errors import (
    DegenerateFit,
    InsufficientShadows,
    NonConvergence,
    ZeroVariance,
)
from .linear_gaussian import Dataset, default_alpha_grid
from .mc_sim import EmpiricalCurve, empirical_tradeoff
from .rng import stream_generator, stream_key

SIGMA_FLOOR = 1e-6
_SPLIT_STREAM = "mia-shadow-splits"
_PERM_STREAM = "mia-permutation"
_TASK_STREAM = "mia-planted-task"
_MIN_SURVIVING = 8


@dataclass(frozen=True, eq=False)
class ShadowEnsemble:
    """K subset-trained models with per-(shadow, sample) losses.

    `mask[k, j]` says whether sample j was in shadow k's training set;
    `losses[k, j]` is sample j's per-sample loss under shadow k.  Splits
    are balanced so every sample has at least `min_count` in-shadows and
    `min_count` out-shadows.
    """

    mask: np.ndarray
    losses: np.ndarray
    fraction: float
    seed: int
    min_count: int = 3
    dropped: int = 0
    models: tuple[dm.DiffModel, ...] = ()

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        losses = np.asarray(self.losses, dtype=np.float64)
        mask.flags.writeable = False
        losses.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "losses", losses)
        if mask.ndim != 2 or mask.shape != losses.shape:
            raise ValueError("mask and losses must share a (K, n) shape")
        if not np.all(np.isfinite(losses)):
            raise ValueError("shadow losses must be finite")
        in_counts = mask.sum(axis=0)
        if np.any(in_counts < self.min_count) or np.any(
            self.k - in_counts < self.min_count
        ):
            raise ValueError(
                f"every sample needs >= {self.min_count} in- and out-shadows"
            )

    @property
    def k(self) -> int:
        return self.mask.shape[0]

    @property
    def n(self) -> int:
        return self.mask.shape[1]


@dataclass(frozen=True, eq=False)
class AttackScores:
    """Per-sample Gaussian fits and likelihood-ratio attack scores."""

    mu_in: np.ndarray
    mu_out: np.ndarray
    sigma_in: np.ndarray
    sigma_out: np.ndarray
    lira_score: np.ndarray
    tpr_at_fpr: dict[float, float] | None = None

    def __post_init__(self):
        arrays = {}
        for name in ("mu_in", "mu_out", "sigma_in", "sigma_out", "lira_score"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            v.flags.writeable = False
            object.__setattr__(self, name, v)
            arrays[name] = v
        shapes = {v.shape for v in arrays.values()}
        if len(shapes) != 1 or arrays["lira_score"].ndim != 1:
            raise ValueError("score fields must be equal-length vectors")
        if np.any(arrays["sigma_in"] < SIGMA_FLOOR) or np.any(
            arrays["sigma_out"] < SIGMA_FLOOR
        ):
            raise ValueError(f"fitted sigmas must respect the {SIGMA_FLOOR} floor")
        if not np.all(np.isfinite(arrays["lira_score"])):
            raise ValueError("attack scores must be finite")

    @property
    def n(self) -> int:
        return self.lira_score.shape[0]


def _balanced_masks(
    n: int, k: int, size: int, min_count: int, rng: np.random.Generator
) -> np.ndarray:
    """K subsets of fixed size, repaired so per-sample in/out counts hold.

    Repair swaps a deficient sample into (or out of) a shadow in place of
    a sample with surplus count, so per-shadow sizes never change and the
    total deficit strictly decreases.
    """
    if k * size < min_count * n or k * (n - size) < min_count * n:
        raise ValueError(
            "infeasible split: cannot give every sample "
            f">= {min_count} in- and out-shadows with K={k}, size={size}, n={n}"
        )
    masks = np.zeros((k, n), dtype=bool)
    for row in range(k):
        masks[row, rng.choice(n, size=size, replace=False)] = True
    for _ in range(min_count * n * k + 1000):
        in_counts = masks.sum(axis=0)
        need_in = np.flatnonzero(in_counts < min_count)
        need_out = np.flatnonzero(in_counts > k - min_count)
        if need_in.size == 0 and need_out.size == 0:
            return masks
        if need_in.size:
            j = int(need_in[0])
            shadows = np.flatnonzero(~masks[:, j])
            rng.shuffle(shadows)
            for s in shadows:
                surplus = np.flatnonzero(masks[s] & (in_counts > min_count))
                if surplus.size:
                    evict = int(surplus[rng.integers(surplus.size)])
                    masks[s, j] = True
                    masks[s, evict] = False
                    break
        else:
            j = int(need_out[0])
            shadows = np.flatnonzero(masks[:, j])
            rng.shuffle(shadows)
            for s in shadows:
                starved = np.flatnonzero(~masks[s] & (in_counts < k - min_count))
                if starved.size:
                    take = int(starved[rng.integers(starved.size)])
                    masks[s, j] = False
                    masks[s, take] = True
                    break
    raise RuntimeError("shadow split balancing did not terminate")


def train_shadows(
    data: Dataset,
    template: dm.DiffModel,
    k: int,
    fraction: float,
    cfg: dm.TrainConfig | None = None,
    *,
    loss: dm.LossKind,
    seed: int = 0,
    min_count: int = 3,
) -> ShadowEnsemble:
    """Train K models on independent balanced subsamples of `data`.

    A shadow whose training does not converge is dropped (and counted);
    fewer than 8 survivors, or survivor splits that break the per-sample
    in/out minimum, raise InsufficientShadows.
    """
    if k < _MIN_SURVIVING:
        raise InsufficientShadows(f"need at least {_MIN_SURVIVING} shadows, got {k}")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    cfg = dm.TrainConfig() if cfg is None else cfg
    size = int(round(fraction * data.n))
    if not 0 < size < data.n:
        raise ValueError(f"fraction {fraction} leaves an empty split at n={data.n}")
    rng = stream_generator(seed, _SPLIT_STREAM)
    masks = _balanced_masks(data.n, k, size, min_count, rng)

    kept_rows: list[int] = []
    models: list[dm.DiffModel] = []
    losses = np.empty((k, data.n))
    for s in range(k):
        sub = Dataset(x=data.x[masks[s]], y=data.y[masks[s]])
        init = dm.init_model(
            template.kind,
            template.widths,
            seed=stream_key(seed, f"mia-shadow-init-{s}") % (2**63),
            activation=template.activation,
            l2=template.l2,
        )
        try:
            model = dm.train(init, loss, sub, cfg)
        except NonConvergence:
            continue
        losses[s] = dm.per_sample_loss(loss, dm.predict(model, data.x), data.y)
        kept_rows.append(s)
        models.append(model)

    dropped = k - len(kept_rows)
    if len(kept_rows) < _MIN_SURVIVING:
        raise InsufficientShadows(
            f"only {len(kept_rows)} of {k} shadows converged "
            f"(need >= {_MIN_SURVIVING})"
        )
    mask = masks[kept_rows]
    in_counts = mask.sum(axis=0)
    if np.any(in_counts < min_count) or np.any(
        len(kept_rows) - in_counts < min_count
    ):
        raise InsufficientShadows(
            "shadow drop-outs broke the per-sample in/out minimum; "
            "increase K or loosen training tolerance"
        )
    return ShadowEnsemble(
        mask=mask,
        losses=losses[kept_rows],
        fraction=fraction,
        seed=seed,
        min_count=min_count,
        dropped=dropped,
        models=tuple(models),
    )


def _moments(losses, select, counts):
    """Masked per-column mean and floored std (ddof=1)."""
    s1 = np.where(select, losses, 0.0).sum(axis=0)
    s2 = np.where(select, losses**2, 0.0).sum(axis=0)
    mu = s1 / counts
    var = np.maximum(s2 - counts * mu**2, 0.0) / (counts - 1)
    return mu, np.maximum(np.sqrt(var), SIGMA_FLOOR)


def _ensemble_fits(ensemble: ShadowEnsemble):
    """Per-sample (mu_in, sigma_in, mu_out, sigma_out) over the ensemble."""
    counts_in = ensemble.mask.sum(axis=0)
    counts_out = ensemble.k - counts_in
    if np.any(counts_in < 3) or np.any(counts_out < 3):
        raise DegenerateFit("need >= 3 in- and out-observations per sample")
    mu_in, sigma_in = _moments(ensemble.losses, ensemble.mask, counts_in)
    mu_out, sigma_out = _moments(ensemble.losses, ~ensemble.mask, counts_out)
    return mu_in, sigma_in, mu_out, sigma_out


def lira_scores(
    ensemble: ShadowEnsemble,
    target_losses: np.ndarray,
    *,
    membership: np.ndarray | None = None,
    fprs: tuple[float, ...] = (0.05, 0.01),
) -> AttackScores:
    """Gaussian likelihood-ratio scores of target losses against the ensemble.

    Per sample: fit N(mu_in, sigma_in) to its losses under in-shadows and
    N(mu_out, sigma_out) under out-shadows (std floored at SIGMA_FLOOR),
    then score log N(l; in) - log N(l; out).  Higher means more
    member-like.  With ground-truth `membership` the TPR at each
    requested FPR is attached.
    """
    target = np.asarray(target_losses, dtype=np.float64)
    if target.shape != (ensemble.n,):
        raise ValueError(f"expected {ensemble.n} target losses, got {target.shape}")
    if not np.all(np.isfinite(target)):
        raise ValueError("target losses must be finite")
    mu_in, sigma_in, mu_out, sigma_out = _ensemble_fits(ensemble)
    score = stats.norm.logpdf(target, mu_in, sigma_in) - stats.norm.logpdf(
        target, mu_out, sigma_out
    )
    rates = None
    if membership is not None:
        membership = np.asarray(membership, dtype=bool)
        if membership.shape != target.shape:
            raise ValueError("membership must be one flag per sample")
        rates = {
            fpr: tpr_at_fpr(score[membership], score[~membership], fpr)
            for fpr in fprs
        }
    return AttackScores(
        mu_in=mu_in,
        mu_out=mu_out,
        sigma_in=sigma_in,
        sigma_out=sigma_out,
        lira_score=score,
        tpr_at_fpr=rates,
    )


def ensemble_attack_scores(
    ensemble: ShadowEnsemble,
) -> tuple[np.ndarray, np.ndarray]:
    """Attack every shadow in turn, calibrated on the remaining shadows.

    Each shadow plays the target of one attack: its losses are scored
    against Gaussian fits in which the shadow's own observation is left
    out of the side it belongs to (the opposite side never saw it, so
    that fit is reused as-is).  Averaging a sample's member scores over
    the attacks where it was in the target's training set is the
    mean-of-K-attacks summary of its vulnerability.

    Returns `(member, nonmember)` K x n arrays with scores at the pairs
    of the matching kind and NaN elsewhere.
    """
    mask = ensemble.mask
    losses = ensemble.losses
    counts_in = mask.sum(axis=0)
    counts_out = ensemble.k - counts_in
    if np.any(counts_in < 3) or np.any(counts_out < 3):
        raise DegenerateFit("need >= 3 in- and out-observations per sample")

    def loo_moments(select, counts):
        # leave the scored (shadow, sample) loss out of its own side's fit
        s1 = np.where(select, losses, 0.0).sum(axis=0)
        s2 = np.where(select, losses**2, 0.0).sum(axis=0)
        c1 = counts - 1.0
        mu = (s1 - losses) / c1
        var = np.maximum(s2 - losses**2 - c1 * mu**2, 0.0) / (c1 - 1.0)
        return mu, np.maximum(np.sqrt(var), SIGMA_FLOOR)

    mu_in, sigma_in, mu_out, sigma_out = _ensemble_fits(ensemble)
    mu_in_loo, sigma_in_loo = loo_moments(mask, counts_in)
    mu_out_loo, sigma_out_loo = loo_moments(~mask, counts_out)
    member = stats.norm.logpdf(losses, mu_in_loo, sigma_in_loo) - stats.norm.logpdf(
        losses, mu_out, sigma_out
    )
    nonmember = stats.norm.logpdf(losses, mu_in, sigma_in) - stats.norm.logpdf(
        losses, mu_out_loo, sigma_out_loo
    )
    return (
        np.where(mask, member, np.nan),
        np.where(~mask, nonmember, np.nan),
    )


def tradeoff_from_scores(
    member_scores: np.ndarray,
    nonmember_scores: np.ndarray,
    alpha_grid: np.ndarray | None = None,
) -> EmpiricalCurve:
    """Threshold sweep treating higher score as "predict member".

    Negating scores maps the convention onto the residual-norm sweep
    (smaller norm means member), so both flows share one implementation.
    """
    grid = default_alpha_grid() if alpha_grid is None else alpha_grid
    return empirical_tradeoff(
        -np.asarray(member_scores, dtype=np.float64),
        -np.asarray(nonmember_scores, dtype=np.float64),
        grid,
    )


def tpr_at_fpr(
    member_scores: np.ndarray, nonmember_scores: np.ndarray, fpr: float
) -> float:
    """True-positive rate of the score threshold calibrated at `fpr`."""
    if not 0.0 < fpr <= 1.0:
        raise ValueError("fpr must lie in (0, 1]")
    curve = tradeoff_from_scores(
        member_scores, nonmember_scores, np.array([fpr])
    )
    return float(1.0 - curve.beta[0])


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of average ranks; ties get averaged ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 3:
        raise ValueError("need two equal-length vectors of >= 3 values")
    ra = stats.rankdata(a)
    rb = stats.rankdata(b)
    if np.ptp(ra) == 0.0 or np.ptp(rb) == 0.0:
        raise ZeroVariance("rank vector is constant")
    return float(np.corrcoef(ra, rb)[0, 1])


def permutation_pvalue(
    a: np.ndarray, b: np.ndarray, n_perm: int = 2000, seed: int = 0
) -> float:
    """Two-sided permutation p-value for Spearman correlation.

    Permutes b, add-one smoothed: p = (1 + #{|rho_perm| >= |rho|}) /
    (1 + n_perm).
    """
    if n_perm < 1000:
        raise ValueError("n_perm must be >= 1000")
    observed = abs(spearman(a, b))
    ra = stats.rankdata(np.asarray(a, dtype=np.float64))
    rb = stats.rankdata(np.asarray(b, dtype=np.float64))
    za = (ra - ra.mean()) / ra.std()
    zb = (rb - rb.mean()) / rb.std()
    n = za.size
    rng = stream_generator(seed, _PERM_STREAM)
    hits = 0
    for _ in range(n_perm):
        rho = float(za @ zb[rng.permutation(n)]) / n
        if abs(rho) >= observed - 1e-12:
            hits += 1
    return (1 + hits) / (1 + n_perm)


def planted_outlier_task(
    n: int = 1000, outlier_fraction: float = 0.05, seed: int = 0
) -> tuple[Dataset, np.ndarray]:
    """Two Gaussian class blobs plus a few far-out randomly labeled points.

    Inliers are unit blobs at +/- 1.2 along the first axis, labeled by
    blob; outliers sit at radius 5-7 in a random direction with a random
    label, making them geometrically extreme and hard to fit - exactly
    the samples a sensitivity score should flag.  Returns the dataset and
    the outlier indicator.
    """
    if not 0.0 < outlier_fraction < 1.0:
        raise ValueError("outlier_fraction must lie strictly between 0 and 1")
    rng = stream_generator(seed, _TASK_STREAM)
    n_out = max(1, int(round(outlier_fraction * n)))
    n_in = n - n_out
    labels_in = rng.integers(0, 2, size=n_in)
    x_in = rng.standard_normal((n_in, 2))
    x_in[:, 0] += 1.2 * (2.0 * labels_in - 1.0)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n_out)
    radius = rng.uniform(5.0, 7.0, size=n_out)
    x_out = radius[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
    labels_out = rng.integers(0, 2, size=n_out)

    x = np.vstack([x_in, x_out])
    y = np.concatenate([labels_in, labels_out]).astype(np.float64)[:, None]
    is_outlier = np.zeros(n, dtype=bool)
    is_outlier[n_in:] = True
    order = rng.permutation(n)
    return Dataset(x=x[order], y=y[order]), is_outlier[order]


@dataclass(frozen=True)
class AuditConfig:
    """End-to-end audit parameters; defaults are desk-scale."""

    shadows: int = 32
    fraction: float = 0.5
    gls_shadows: int = 8
    seed: int = 0
    train: dm.TrainConfig = field(
        default_factory=lambda: dm.TrainConfig(max_epochs=3000, tolerance=1e-4)
    )
    gls: ge.CgConfig = field(default_factory=ge.CgConfig)
    layers: str = "full"
    quantile: float = 0.02
    fprs: tuple[float, ...] = (0.05, 0.01)
    n_perm: int = 2000
    alpha_points: int = 100
    min_shadow_count: int = 3

    def __post_init__(self):
        if self.gls_shadows < 1:
            raise ValueError("gls_shadows must be >= 1")
        if not 0.0 < self.quantile <= 0.5:
            raise ValueError("quantile must lie in (0, 0.5]")
        if self.alpha_points < 2:
            raise ValueError("alpha_points must be >= 2")


def run_audit(
    data: Dataset,
    template: dm.DiffModel,
    loss: dm.LossKind,
    cfg: AuditConfig | None = None,
) -> dict:
    """Full pipeline: shadows, cross-attacks, GLS, correlation, curves.

    A single attack's score is dominated by the one loss draw it
    observes, so the pipeline attacks every shadow in turn (calibrated
    on the others, `ensemble_attack_scores`) and summarizes each sample
    by its mean score over the attacks where it was a member.  The GLS
    trace is likewise averaged over the first `gls_shadows` shadow
    models, each evaluated on its own training subset.  Rank correlation
    with a permutation p-value and top- vs bottom-quantile group curves
    are computed from these per-sample summaries.
    """
    cfg = AuditConfig() if cfg is None else cfg
    n = data.n
    ensemble = train_shadows(
        data,
        template,
        cfg.shadows,
        cfg.fraction,
        cfg.train,
        loss=loss,
        seed=cfg.seed,
        min_count=cfg.min_shadow_count,
    )
    mu_in, sigma_in, mu_out, sigma_out = _ensemble_fits(ensemble)
    member_mat, nonmember_mat = ensemble_attack_scores(ensemble)
    lira_mean = np.nanmean(member_mat, axis=0)
    member_obs = member_mat[ensemble.mask]
    non_obs = nonmember_mat[~ensemble.mask]
    rates = {fpr: tpr_at_fpr(member_obs, non_obs, fpr) for fpr in cfg.fprs}

    used = min(cfg.gls_shadows, ensemble.k)
    layer_mask = ge.parse_layer_mask(cfg.layers, ensemble.models[0])
    gls_sum = np.zeros(n)
    gls_cnt = np.zeros(n, dtype=np.int64)
    for s in range(used):
        rows = np.flatnonzero(ensemble.mask[s])
        sub = Dataset(x=data.x[rows], y=data.y[rows])
        for g in ge.gls_compute(
            ensemble.models[s], loss, sub, range(sub.n), cfg.gls, mask=layer_mask
        ):
            if isinstance(g, ge.GlsMatrix):
                gls_sum[rows[g.index]] += g.trace
                gls_cnt[rows[g.index]] += 1
    gls_trace = np.full(n, np.nan)
    np.divide(gls_sum, gls_cnt, out=gls_trace, where=gls_cnt > 0)

    valid = np.isfinite(gls_trace)
    rho = spearman(gls_trace[valid], lira_mean[valid])
    p_value = permutation_pvalue(
        gls_trace[valid], lira_mean[valid], n_perm=cfg.n_perm, seed=cfg.seed
    )

    ranked = np.flatnonzero(valid)[np.argsort(gls_trace[valid])]
    group_size = max(3, int(np.ceil(cfg.quantile * ranked.size)))
    grid = default_alpha_grid(cfg.alpha_points)

    def group_curve(samples: np.ndarray) -> EmpiricalCurve:
        chosen = np.zeros(n, dtype=bool)
        chosen[samples] = True
        pos = member_mat[:, chosen][ensemble.mask[:, chosen]]
        return tradeoff_from_scores(pos, non_obs, grid)

    curves = {
        "top": group_curve(ranked[-group_size:]),
        "bottom": group_curve(ranked[:group_size]),
    }

    in_counts = ensemble.mask.sum(axis=0)
    per_sample = [
        {
            "index": int(j),
            "in_shadows": int(in_counts[j]),
            "gls_trace": float(gls_trace[j]) if np.isfinite(gls_trace[j]) else None,
            "lira_score": float(lira_mean[j]),
            "mu_in": float(mu_in[j]),
            "mu_out": float(mu_out[j]),
            "sigma_in": float(sigma_in[j]),
            "sigma_out": float(sigma_out[j]),
        }
        for j in range(n)
    ]
    report = {
        "per_sample": per_sample,
        "global": {
            "spearman": rho,
            "p_value": p_value,
            "tpr_at_fpr": {repr(f): v for f, v in rates.items()},
            "n": int(n),
            "shadows": int(ensemble.k),
            "gls_shadows": int(used),
            "dropped": int(ensemble.dropped),
            "seed": int(cfg.seed),
            "quantile": cfg.quantile,
        },
    }
    return {"report": report, "curves": curves, "ensemble": ensemble}
