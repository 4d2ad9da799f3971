"""Command-line entry point tying the pipelines together.

Four subcommands cover the full workflow: ``leverage`` (per-sample hat
diagnostics and theoretical curves for a linear dataset), ``simulate``
(Monte-Carlo validation of the residual trade-off laws), ``gls``
(generalized leverage for a trained checkpoint), and ``audit`` (shadow
ensemble + GLS correlation on a dataset or the built-in planted-outlier
task).

Every run writes into a fresh output directory: a `config.json` snapshot
of the fully resolved parameters, the machine-readable report, and any
curve CSVs. Re-running a snapshot reproduces the outputs byte for byte.

Exit codes: 0 success; 2 malformed input or arguments; 3 rank-deficient
design; 4 CG non-convergence under --strict; 5 fewer than the minimum
surviving shadow models; 6 output directory already exists.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diff_models as dm
from . import gls_engine as ge
from . import io as _io
from . import linear_gaussian as lg
from . import mc_sim as mc
from . import mia_audit as ma
from .errors import (
    InputFormatError,
    InsufficientShadows,
    LevauditError,
    NonConvergence,
    RankDeficient,
)
from .rng import stream_key

__all__ = [
    "RunConfig",
    "parse_alpha_grid",
    "parse_args",
    "dispatch",
    "main",
    "EXIT_OK",
    "EXIT_BAD_INPUT",
    "EXIT_RANK_DEFICIENT",
    "EXIT_NO_CONVERGENCE",
    "EXIT_FEW_SHADOWS",
    "EXIT_OUT_EXISTS",
]

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_RANK_DEFICIENT = 3
EXIT_NO_CONVERGENCE = 4
EXIT_FEW_SHADOWS = 5
EXIT_OUT_EXISTS = 6

_SUBCOMMANDS = ("leverage", "simulate", "gls", "audit")
_THREADS_ENV = "LEVAUDIT_THREADS"


class _CliFailure(Exception):
    """Internal: carries an exit code and a user-facing message."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved parameters of one CLI run.

    The on-disk form (``to_dict`` / ``from_dict``) round-trips losslessly;
    a copy is written beside every run's outputs as `config.json`.
    """

    subcommand: str
    out: str
    input: str | None = None
    checkpoint: str | None = None
    seed: int = 0
    sigma2: float = 1.0
    damping: float = 1e-3
    cg_iters: int = 100
    cg_tol: float = 1e-3
    layers: str = "full"
    trials: int = 200_000
    shadows: int = 32
    fraction: float = 0.5
    samples: int = 0  # 0 -> the audit task's own default size
    alpha_grid: str = "1e-4:0.9999:400:log"
    scalar: str = "trace"
    targets: str = "all"
    oracle: str | None = None
    strict: bool = False
    format: str = "json"
    h_values: tuple[float, ...] = (0.1, 0.5, 0.9)
    m_values: tuple[int, ...] = (1, 10)

    def __post_init__(self):
        if self.subcommand not in _SUBCOMMANDS:
            raise ValueError(f"unknown subcommand {self.subcommand!r}")
        if self.format not in ("json", "csv"):
            raise ValueError(f"format must be json or csv, got {self.format!r}")
        if self.scalar not in ("trace", "frobenius", "spectral"):
            raise ValueError(f"unknown scalar reduction {self.scalar!r}")
        if self.oracle not in (None, "dense"):
            raise ValueError(f"unknown oracle {self.oracle!r}")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.damping < 0:
            raise ValueError("lambda must be >= 0")
        if self.cg_iters < 1:
            raise ValueError("cg-iters must be >= 1")
        if not self.cg_tol > 0:
            raise ValueError("cg-tol must be positive")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.shadows < 2:
            raise ValueError("shadows must be >= 2")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        if self.samples < 0:
            raise ValueError("samples must be >= 0")
        parse_alpha_grid(self.alpha_grid)
        object.__setattr__(self, "h_values", tuple(float(h) for h in self.h_values))
        object.__setattr__(self, "m_values", tuple(int(m) for m in self.m_values))
        for h in self.h_values:
            if not 0.0 <= h < 1.0:
                raise ValueError(f"h must lie in [0, 1), got {h}")
        for m in self.m_values:
            if m < 1:
                raise ValueError(f"m must be >= 1, got {m}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["h_values"] = list(self.h_values)
        out["m_values"] = list(self.m_values)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kwargs = dict(raw)
        for key in ("h_values", "m_values"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def parse_alpha_grid(spec: str) -> np.ndarray:
    """Parse a ``lo:hi:count:{log,lin}`` grid specification."""
    parts = str(spec).split(":")
    if len(parts) != 4:
        raise ValueError(f"alpha grid must be lo:hi:count:{{log,lin}}, got {spec!r}")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ValueError(f"bad alpha grid {spec!r}: {exc}") from None
    if parts[3] not in ("log", "lin"):
        raise ValueError(f"alpha grid scale must be log or lin, got {parts[3]!r}")
    if not 0.0 < lo < hi < 1.0:
        raise ValueError(f"alpha grid must satisfy 0 < lo < hi < 1, got {spec!r}")
    if count < 2:
        raise ValueError(f"alpha grid needs at least 2 points, got {count}")
    if parts[3] == "log":
        return np.geomspace(lo, hi, count)
    return np.linspace(lo, hi, count)


def _thread_count() -> int:
    raw = os.environ.get(_THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise _CliFailure(
            EXIT_BAD_INPUT, f"{_THREADS_ENV} must be a positive integer, got {raw!r}"
        ) from None
    if threads < 1:
        raise _CliFailure(
            EXIT_BAD_INPUT, f"{_THREADS_ENV} must be a positive integer, got {raw!r}"
        )
    return threads


def _chunked_map(fn, items: list) -> list:
    """Map `fn` over items, possibly in a thread pool; order preserved.

    Results are merged by position, so the parallelism level never changes
    the output.
    """
    workers = min(_thread_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fresh_run_dir(out: str) -> Path:
    path = Path(out)
    if path.exists():
        raise _CliFailure(
            EXIT_OUT_EXISTS,
            f"output directory {out!r} already exists; runs never append",
        )
    path.mkdir(parents=True)
    return path


def _write_config(run_dir: Path, cfg: RunConfig) -> None:
    _io.dump_json(run_dir / "config.json", cfg.to_dict())


def _read_input_dataset(cfg: RunConfig) -> lg.Dataset:
    if cfg.input is None:
        raise _CliFailure(EXIT_BAD_INPUT, f"{cfg.subcommand} requires --input")
    return _io.read_dataset(cfg.input)


def _parse_targets(spec: str, n: int) -> list[int]:
    text = spec.strip()
    if text == "all":
        return list(range(n))
    if text == "" or text == "none":
        return []
    try:
        return [int(tok) for tok in text.split(",")]
    except ValueError:
        raise ValueError(
            f"targets must be 'all', 'none', or comma-separated integers, got {spec!r}"
        ) from None


# ---------------------------------------------------------------------------
# leverage


def cmd_leverage(cfg: RunConfig) -> int:
    data = _read_input_dataset(cfg)
    run_dir = _fresh_run_dir(cfg.out)
    _write_config(run_dir, cfg)

    fit = lg.fit_ols(data)
    r_norm2 = np.einsum("nm,nm->n", fit.residuals, fit.residuals)
    grid = parse_alpha_grid(cfg.alpha_grid)

    statistic = []
    curve_cols: dict[str, np.ndarray] = {"alpha": grid}
    width = len(str(max(data.n - 1, 1)))
    for i, h in enumerate(fit.leverage):
        h = float(h)
        if h >= 1.0 - 1e-12:
            # Interpolation boundary: the statistic diverges and the
            # trade-off curve collapses to beta = 0 (perfect separation).
            statistic.append(None)
            beta = np.zeros_like(grid)
        else:
            statistic.append(
                float(lg.optimal_mia_statistic(r_norm2[i], h, cfg.sigma2, data.m))
            )
            beta = lg.theoretical_tradeoff(h, data.m, grid).beta
        curve_cols[f"beta_{i:0{width}d}"] = beta

    per_sample = [
        {
            "index": i,
            "leverage": float(fit.leverage[i]),
            "r_norm2": float(r_norm2[i]),
            "statistic": statistic[i],
        }
        for i in range(data.n)
    ]
    report = {
        "per_sample": per_sample,
        "global": {
            "n": data.n,
            "d": data.d,
            "m": data.m,
            "sigma2": cfg.sigma2,
            "condition_number": fit.condition_number,
            "leverage_sum": float(fit.leverage.sum()),
        },
    }
    if cfg.format == "json":
        _io.dump_json(run_dir / "report.json", _io.jsonable(report))
    else:
        _io.write_columns_csv(
            run_dir / "report.csv",
            {
                "index": np.arange(data.n, dtype=np.float64),
                "leverage": fit.leverage,
                "r_norm2": r_norm2,
                "statistic": np.array(
                    [math.nan if s is None else s for s in statistic]
                ),
            },
        )
        _io.dump_json(run_dir / "global.json", _io.jsonable(report["global"]))
    _io.write_columns_csv(run_dir / "curves.csv", curve_cols)
    print(f"leverage: wrote {data.n} samples to {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _design_with_leverage(h: float, m: int) -> lg.Dataset:
    """Two-row single-column design whose first row has leverage `h`."""
    a = math.sqrt(h / (1.0 - h))
    x = np.array([[a], [1.0]])
    return lg.Dataset(x=x, y=np.zeros((2, m)))


def _simulate_cell(cfg: RunConfig, h: float, m: int) -> dict:
    data = _design_with_leverage(h, m)
    cell_seed = stream_key(cfg.seed, f"cli-simulate-h{h:g}-m{m}") % (2**63)
    sim = mc.SimConfig(
        data=data,
        gen=lg.GenerativeConfig(
            theta_star=np.zeros((1, m)), sigma2=cfg.sigma2, seed=0
        ),
        trials=cfg.trials,
        target_index=0,
        seed=int(cell_seed),
    )
    member, non_member = mc.simulate_residual_pairs(sim)
    grid = parse_alpha_grid(cfg.alpha_grid)
    emp = mc.empirical_tradeoff(member, non_member, grid, h_used=h)
    theory = lg.theoretical_tradeoff(h, m, grid)
    return {
        "h": h,
        "m": m,
        "trials": cfg.trials,
        "sup_deviation": mc.sup_deviation(emp, theory),
        "member_mean_norm2": float(member.mean()),
        "nonmember_mean_norm2": float(non_member.mean()),
        "curve": {
            "alpha": grid,
            "beta_theory": theory.beta,
            "beta_empirical": emp.beta,
        },
    }


def cmd_simulate(cfg: RunConfig) -> int:
    run_dir = _fresh_run_dir(cfg.out)
    _write_config(run_dir, cfg)

    cells = [(h, m) for h in cfg.h_values for m in cfg.m_values]
    results = _chunked_map(lambda hm: _simulate_cell(cfg, *hm), cells)

    records = []
    for res in results:
        curve = res.pop("curve")
        name = f"curve_h{res['h']:g}_m{res['m']}.csv"
        _io.write_columns_csv(run_dir / name, curve)
        records.append(res)

    if cfg.format == "json":
        _io.dump_json(run_dir / "cells.json", _io.jsonable(records))
    else:
        _io.write_columns_csv(
            run_dir / "cells.csv",
            {
                "h": np.array([r["h"] for r in records]),
                "m": np.array([r["m"] for r in records], dtype=np.float64),
                "trials": np.array(
                    [r["trials"] for r in records], dtype=np.float64
                ),
                "sup_deviation": np.array([r["sup_deviation"] for r in records]),
            },
        )
    worst = max(r["sup_deviation"] for r in records)
    print(f"simulate: {len(records)} cells, worst sup_deviation {worst:.5f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gls


def _gls_record(res, scalar: str) -> dict:
    if isinstance(res, ge.GlsFailure):
        return {
            "index": res.index,
            "error": res.error,
            "message": res.message,
            "converged": False,
        }
    return {
        "index": res.index,
        "gls_trace": res.trace,
        "frobenius": res.frobenius,
        "spectral": res.spectral,
        "scalar": ge.scalarize(res, ge.ScalarOp(scalar)),
        "space": res.space.value,
        "cg_iters": res.cg_iters,
        "cg_residual": res.cg_residual,
        "converged": res.converged,
    }


def cmd_gls(cfg: RunConfig) -> int:
    if cfg.checkpoint is None:
        raise _CliFailure(EXIT_BAD_INPUT, "gls requires --checkpoint")
    model, loss = dm.load_model(cfg.checkpoint)
    data = _read_input_dataset(cfg)
    targets = _parse_targets(cfg.targets, data.n)
    mask = ge.parse_layer_mask(cfg.layers, model)
    cg = ge.CgConfig(
        damping=cfg.damping, max_iters=cfg.cg_iters, residual_tol=cfg.cg_tol
    )

    run_dir = _fresh_run_dir(cfg.out)
    _write_config(run_dir, cfg)

    threads = max(1, min(_thread_count(), len(targets)))
    chunks = [list(c) for c in np.array_split(targets, threads) if len(c)]
    parts = _chunked_map(
        lambda chunk: ge.gls_compute(model, loss, data, chunk, cfg=cg, mask=mask),
        chunks,
    )
    results = [res for part in parts for res in part]

    records = [_gls_record(res, cfg.scalar) for res in results]
    oracle_gap = None
    if cfg.oracle == "dense":
        dense = ge.gls_dense(model, loss, data, targets, damping=cfg.damping, mask=mask)
        gaps = []
        by_index = {r.index: r for r in dense if isinstance(r, ge.GlsMatrix)}
        for rec, res in zip(records, results):
            if isinstance(res, ge.GlsMatrix) and res.index in by_index:
                gap = float(
                    np.abs(res.matrix - by_index[res.index].matrix).max()
                )
                rec["dense_discrepancy"] = gap
                gaps.append(gap)
        oracle_gap = max(gaps) if gaps else None

    bad = [r for r in records if not r["converged"]]
    report = {
        "per_target": records,
        "global": {
            "n_targets": len(targets),
            "n_failed": len(bad),
            "layers": cfg.layers,
            "damping": cfg.damping,
            "oracle_max_discrepancy": oracle_gap,
        },
    }
    if cfg.format == "json":
        _io.dump_json(run_dir / "report.json", _io.jsonable(report))
    else:
        ok = [r for r in records if "gls_trace" in r]
        _io.write_columns_csv(
            run_dir / "report.csv",
            {
                "index": np.array([r["index"] for r in ok], dtype=np.float64),
                "gls_trace": np.array([r["gls_trace"] for r in ok]),
                "frobenius": np.array([r["frobenius"] for r in ok]),
                "spectral": np.array([r["spectral"] for r in ok]),
                "converged": np.array(
                    [float(r["converged"]) for r in ok]
                ),
            },
        )
        _io.dump_json(run_dir / "global.json", _io.jsonable(report["global"]))

    if cfg.strict and bad:
        raise _CliFailure(
            EXIT_NO_CONVERGENCE,
            f"{len(bad)} of {len(targets)} targets did not converge "
            f"(first: index {bad[0]['index']}); rerun without --strict to keep "
            "per-target error records",
        )
    print(f"gls: {len(records)} targets ({len(bad)} failed) to {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# audit


def cmd_audit(cfg: RunConfig) -> int:
    if cfg.input is None:
        task_kwargs = {"seed": cfg.seed}
        if cfg.samples:
            task_kwargs["n"] = cfg.samples
        data = ma.planted_outlier_task(**task_kwargs)
    else:
        data = _io.read_dataset(cfg.input)
    if data.y.shape[1] != 1:
        raise _CliFailure(EXIT_BAD_INPUT, "audit requires a single label column")
    if not np.isin(np.unique(data.y), (0.0, 1.0)).all():
        raise _CliFailure(
            EXIT_BAD_INPUT,
            "audit requires binary 0/1 labels in the last column",
        )

    grid_count = parse_alpha_grid(cfg.alpha_grid).size
    audit_cfg = ma.AuditConfig(
        shadows=cfg.shadows,
        fraction=cfg.fraction,
        seed=cfg.seed,
        gls=ge.CgConfig(
            damping=cfg.damping, max_iters=cfg.cg_iters, residual_tol=cfg.cg_tol
        ),
        layers=cfg.layers,
        alpha_points=grid_count,
    )
    template = dm.init_model(
        dm.ModelKind.MLP, (data.x.shape[1], 32, 1), seed=0, l2=1e-3
    )

    run_dir = _fresh_run_dir(cfg.out)
    _write_config(run_dir, cfg)

    result = ma.run_audit(data, template, dm.LossKind.CROSS_ENTROPY, audit_cfg)
    report = result["report"]
    if cfg.format == "json":
        _io.dump_json(run_dir / "report.json", _io.jsonable(report))
    else:
        rows = report["per_sample"]
        _io.write_columns_csv(
            run_dir / "report.csv",
            {
                "index": np.array([r["index"] for r in rows], dtype=np.float64),
                "gls_trace": np.array(
                    [
                        math.nan if r["gls_trace"] is None else r["gls_trace"]
                        for r in rows
                    ]
                ),
                "lira_score": np.array([r["lira_score"] for r in rows]),
                "mu_in": np.array([r["mu_in"] for r in rows]),
                "mu_out": np.array([r["mu_out"] for r in rows]),
                "sigma_in": np.array([r["sigma_in"] for r in rows]),
                "sigma_out": np.array([r["sigma_out"] for r in rows]),
            },
        )
        _io.dump_json(run_dir / "global.json", _io.jsonable(report["global"]))
    for name, curve in (("top", result["curves"]["top"]),
                        ("bottom", result["curves"]["bottom"])):
        _io.write_columns_csv(
            run_dir / f"curve_{name}.csv",
            {"alpha": curve.alpha, "beta": curve.beta},
        )
    g = report["global"]
    print(
        f"audit: spearman {g['spearman']:+.4f} (p={g['p_value']:.4f}) "
        f"over {g['n']} samples to {run_dir}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="levaudit",
        description="Leverage-based membership-vulnerability auditing.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}
    defaults = RunConfig(subcommand="leverage", out="")

    def add_common(p):
        p.add_argument("--out", required=True, help="fresh output directory")
        p.add_argument(
            "--config", default=None,
            help="resolved-config snapshot to start from; flags override",
        )
        p.add_argument("--seed", type=int, default=defaults.seed)
        p.add_argument(
            "--format", choices=("json", "csv"), default=defaults.format,
            help="report format (curves are always CSV)",
        )
        p.add_argument(
            "--alpha-grid", dest="alpha_grid", default=defaults.alpha_grid,
            help="alpha grid as lo:hi:count:{log,lin}",
        )

    p = subparsers["leverage"] = sub.add_parser(
        "leverage", help="hat-matrix diagnostics for a dataset"
    )
    add_common(p)
    p.add_argument("--input", required=True, help="dataset (.csv or .leva)")
    p.add_argument("--sigma2", type=float, default=defaults.sigma2)

    p = subparsers["simulate"] = sub.add_parser(
        "simulate", help="Monte-Carlo trade-off validation"
    )
    add_common(p)
    p.add_argument("--sigma2", type=float, default=defaults.sigma2)
    p.add_argument("--trials", type=int, default=defaults.trials)
    p.add_argument(
        "--h", dest="h_values", default="0.1,0.5,0.9",
        help="comma-separated leverage values",
    )
    p.add_argument(
        "--m", dest="m_values", default="1,10",
        help="comma-separated output dimensions",
    )

    p = subparsers["gls"] = sub.add_parser(
        "gls", help="generalized leverage for a checkpoint"
    )
    add_common(p)
    p.add_argument("--input", required=True, help="dataset (.csv or .leva)")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--lambda", dest="damping", type=float, default=defaults.damping)
    p.add_argument("--cg-iters", dest="cg_iters", type=int, default=defaults.cg_iters)
    p.add_argument("--cg-tol", dest="cg_tol", type=float, default=defaults.cg_tol)
    p.add_argument("--layers", default=defaults.layers, help="full or last:k")
    p.add_argument(
        "--targets", default=defaults.targets,
        help="'all', 'none', or comma-separated indices",
    )
    p.add_argument(
        "--scalar", choices=("trace", "frobenius", "spectral"),
        default=defaults.scalar,
    )
    p.add_argument(
        "--oracle", choices=("dense",), default=None,
        help="also run the dense-inverse path and record the gap",
    )
    p.add_argument("--strict", action="store_true")

    p = subparsers["audit"] = sub.add_parser(
        "audit", help="shadow-ensemble audit with GLS correlation"
    )
    add_common(p)
    p.add_argument(
        "--input", default=None,
        help="dataset with 0/1 labels; omitted -> built-in planted-outlier task",
    )
    p.add_argument("--shadows", type=int, default=defaults.shadows)
    p.add_argument("--fraction", type=float, default=defaults.fraction)
    p.add_argument(
        "--samples", type=int, default=defaults.samples,
        help="synthetic task size (0 = task default; ignored with --input)",
    )
    p.add_argument("--lambda", dest="damping", type=float, default=defaults.damping)
    p.add_argument("--cg-iters", dest="cg_iters", type=int, default=defaults.cg_iters)
    p.add_argument("--cg-tol", dest="cg_tol", type=float, default=defaults.cg_tol)
    p.add_argument("--layers", default=defaults.layers, help="full or last:k")
    return parser, subparsers


def _snapshot_defaults(argv) -> dict:
    """Extract --config from argv and load it as parser defaults."""
    tokens = list(argv)
    path = None
    for i, tok in enumerate(tokens):
        if tok == "--config" and i + 1 < len(tokens):
            path = tokens[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read config snapshot {path!r}: {exc}") from None
    if not isinstance(raw, dict):
        raise ValueError(f"config snapshot {path!r} must be a JSON object")
    # The snapshot never overrides where this run writes or what it runs.
    raw.pop("subcommand", None)
    raw.pop("out", None)
    for key in ("h_values", "m_values"):
        if key in raw:
            raw[key] = ",".join(str(v) for v in raw[key])
    return raw


def parse_args(argv) -> RunConfig:
    argv = list(argv)
    parser, subparsers = _build_parser()
    snapshot = _snapshot_defaults(argv)
    if snapshot:
        for name, p in subparsers.items():
            known = {a.dest for a in p._actions}
            p.set_defaults(**{k: v for k, v in snapshot.items() if k in known})
    ns = parser.parse_args(argv)
    raw = vars(ns)
    if "h_values" in raw:
        raw["h_values"] = tuple(float(t) for t in str(raw["h_values"]).split(","))
    if "m_values" in raw:
        raw["m_values"] = tuple(int(t) for t in str(raw["m_values"]).split(","))
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    return RunConfig(**{k: v for k, v in raw.items() if k in fields})


def dispatch(cfg: RunConfig) -> int:
    """Run one resolved config; returns the exit code."""
    handlers = {
        "leverage": cmd_leverage,
        "simulate": cmd_simulate,
        "gls": cmd_gls,
        "audit": cmd_audit,
    }
    try:
        return handlers[cfg.subcommand](cfg)
    except _CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InsufficientShadows as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FEW_SHADOWS
    except RankDeficient as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RANK_DEFICIENT
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (InputFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (LevauditError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


def main(argv=None) -> int:
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else argv)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
