"""Chi-square CDF and quantile via the regularized incomplete gamma function.

Self-contained double-precision evaluation in the classic style: ascending
series on one side of the transition point, Lentz continued fraction on the
other, and a bracketed, bisection-safeguarded Newton iteration for the
quantile. Keeping these local (instead of calling out to a stats library)
pins down the precision/iteration behavior that downstream tolerances rely
on.
"""
from __future__ import annotations

import math

from .errors import NonConvergence

_MACHEP = 2.220446049250313e-16
_MAX_ITERS = 600
_TINY = 1e-300
_NEWTON_ITERS = 120


def _check_df(m: int) -> int:
    if isinstance(m, bool) or not isinstance(m, (int,)):
        raise ValueError(f"degrees of freedom must be a positive integer, got {m!r}")
    if m < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {m}")
    return m


def _log_front(s: float, x: float) -> float:
    # log of x^s e^{-x} / Gamma(s), the prefactor shared by both expansions.
    return s * math.log(x) - x - math.lgamma(s)


def _gamma_p_series(s: float, x: float) -> float:
    # P(s, x) by the ascending series; converges fast for x < s + 1.
    term = 1.0 / s
    total = term
    denom = s
    for _ in range(_MAX_ITERS):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _MACHEP:
            front = _log_front(s, x)
            if front < -745.0:  # exp underflow: P is below double precision
                return 0.0
            return min(math.exp(front) * total, 1.0)
    raise NonConvergence(
        f"incomplete-gamma series stalled at s={s!r}, x={x!r}",
        iterations=_MAX_ITERS,
    )


def _gamma_q_cf(s: float, x: float) -> float:
    # Q(s, x) by Lentz's continued fraction; converges fast for x >= s + 1.
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    f = d
    for i in range(1, _MAX_ITERS + 1):
        a = -i * (i - s)
        b += 2.0
        d = a * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + a / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        f *= delta
        if abs(delta - 1.0) <= _MACHEP:
            front = _log_front(s, x)
            if front < -745.0:
                return 0.0
            return min(math.exp(front) * f, 1.0)
    raise NonConvergence(
        f"incomplete-gamma continued fraction stalled at s={s!r}, x={x!r}",
        iterations=_MAX_ITERS,
    )


def _gamma_p(s: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x < s + 1.0:
        return _gamma_p_series(s, x)
    return 1.0 - _gamma_q_cf(s, x)


def _gamma_q(s: float, x: float) -> float:
    if x <= 0.0:
        return 1.0
    if x < s + 1.0:
        return 1.0 - _gamma_p_series(s, x)
    return _gamma_q_cf(s, x)


def chi2_cdf(x: float, m: int) -> float:
    """CDF of the chi-square distribution with ``m`` degrees of freedom.

    Evaluates the regularized lower incomplete gamma P(m/2, x/2).
    """
    _check_df(m)
    x = float(x)
    if not math.isfinite(x) or x < 0.0:
        raise ValueError(f"chi2_cdf requires finite x >= 0, got {x!r}")
    return _gamma_p(0.5 * m, 0.5 * x)


def chi2_sf(x: float, m: int) -> float:
    """Survival function 1 - CDF, evaluated without cancellation in the tail."""
    _check_df(m)
    x = float(x)
    if not math.isfinite(x) or x < 0.0:
        raise ValueError(f"chi2_sf requires finite x >= 0, got {x!r}")
    return _gamma_q(0.5 * m, 0.5 * x)


def chi2_pdf(x: float, m: int) -> float:
    """Density of the chi-square distribution with ``m`` degrees of freedom."""
    _check_df(m)
    x = float(x)
    if x < 0.0:
        raise ValueError(f"chi2_pdf requires x >= 0, got {x!r}")
    s = 0.5 * m
    if x == 0.0:
        # Finite only for m >= 2; the m=1 density diverges at the origin.
        if m == 2:
            return 0.5
        return 0.0 if m > 2 else math.inf
    log_pdf = (s - 1.0) * math.log(0.5 * x) - 0.5 * x - math.lgamma(s)
    if log_pdf < -745.0:
        return 0.0
    return 0.5 * math.exp(log_pdf)


def _norm_quantile_approx(p: float) -> float:
    # Abramowitz-Stegun 26.2.23 rational approximation, |error| < 4.5e-4.
    # Only used to seed the bracketed Newton iteration.
    q = min(p, 1.0 - p)
    q = max(q, _TINY)
    t = math.sqrt(-2.0 * math.log(q))
    z = t - (2.30753 + 0.27061 * t) / (1.0 + 0.99229 * t + 0.04481 * t * t)
    return z if p > 0.5 else -z


def _quantile_seed(p: float, m: int) -> float:
    s = 0.5 * m
    if p < 1e-6:
        # Leading series term: P ~ (x/2)^s / Gamma(s+1).
        return 2.0 * math.exp((math.log(p) + math.lgamma(s + 1.0)) / s)
    if 1.0 - p < 1e-6:
        # Tail asymptotics: Q ~ (x/2)^{s-1} e^{-x/2} / Gamma(s); fixed-point on u = x/2.
        t0 = -math.log1p(-p) + math.lgamma(s)
        u = max(t0, s + 1.0)
        for _ in range(4):
            u = t0 + (s - 1.0) * math.log(u)
        return 2.0 * max(u, s + 1.0)
    z = _norm_quantile_approx(p)
    t = 1.0 - 2.0 / (9.0 * m) + z * math.sqrt(2.0 / (9.0 * m))
    if t <= 0.0:
        return 2.0 * math.exp((math.log(p) + math.lgamma(s + 1.0)) / s)
    return m * t * t * t


def chi2_quantile(p: float, m: int) -> float:
    """Inverse of :func:`chi2_cdf` in ``p`` for fixed ``m``.

    Bracketed Newton iteration with bisection fallback; the residual
    |chi2_cdf(result, m) - p| is driven to a few ulp of min(p, 1-p),
    comfortably below the 1e-12 contract.
    """
    _check_df(m)
    p = float(p)
    if not (0.0 < p < 1.0):
        raise ValueError(f"chi2_quantile requires 0 < p < 1, got {p!r}")
    s = 0.5 * m
    one_minus_p = 1.0 - p  # exact for p >= 0.5

    def err(x: float) -> float:
        # F(x) - p, evaluated on whichever tail keeps full relative precision.
        if p <= 0.5:
            return _gamma_p(s, 0.5 * x) - p
        return one_minus_p - _gamma_q(s, 0.5 * x)

    q = max(_quantile_seed(p, m), _TINY)
    e = err(q)
    if e == 0.0:
        return q
    if e < 0.0:
        # Seed is left of the root: keep it as the lower bracket and expand up.
        lo, hi = q, q
        for _ in range(300):
            hi = 2.0 * hi + 1.0
            if err(hi) >= 0.0:
                break
            lo = hi
        else:
            raise NonConvergence(
                f"chi2_quantile failed to bracket p={p!r}, m={m}"
            )
        q = lo
    else:
        lo, hi = 0.0, q

    # Exit tolerance sits just above the evaluation noise floor of err():
    # exp(log_front) carries ~|log_front|*eps relative error in the far tails.
    p_small = min(p, one_minus_p)
    tol = (16.0 + 2.0 * abs(math.log(p_small))) * _MACHEP * p_small
    prev_abs = math.inf
    for _ in range(_NEWTON_ITERS):
        e = err(q)
        if e > 0.0:
            hi = q
        elif e < 0.0:
            lo = q
        else:
            return q
        if abs(e) <= tol or (hi - lo) <= 4.0 * _MACHEP * max(q, _TINY):
            return q
        # Newton step, demanding at least a residual halving per iteration;
        # otherwise fall back to bisection (guards against one-sided creep
        # far from the root, where F/f shrinks the step to O(x/m)).
        pdf = chi2_pdf(q, m)
        take_newton = math.isfinite(pdf) and pdf > 0.0 and abs(e) <= 0.5 * prev_abs
        if take_newton:
            q_new = q - e / pdf
            take_newton = lo < q_new < hi
        if not take_newton:
            q_new = 0.5 * (lo + hi)
        if q_new == q:
            return q
        prev_abs = abs(e)
        q = q_new
    raise NonConvergence(
        f"chi2_quantile stalled at p={p!r}, m={m}",
        iterations=_NEWTON_ITERS,
    )
