"""Stability exponents, rate equations and the chaos-rate fit.

Sign conventions: fitted slopes of ``log v`` against ``t`` are *signed*
(negative means decay). The theoretical quantities theta*, xi*, beta* are
positive decay rates. Reports carry both, under explicit names.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq


class RateDomainError(ValueError):
    """Stepsize or constants outside the region where a rate equation has a root."""


# --- regression ----------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    empirical_rate: float
    r_squared: float
    window: tuple[float, float]
    statistic_kind: str = "mean_square"
    n_points: int = 0
    theoretical_decay: Optional[float] = None

    @property
    def empirical_decay(self) -> float:
        return -self.empirical_rate

    @property
    def theoretical_rate(self) -> Optional[float]:
        return None if self.theoretical_decay is None else -self.theoretical_decay


def default_window(times) -> tuple[float, float]:
    """Last two-thirds of the simulated horizon."""
    t = np.asarray(times, dtype=float)
    t0, t1 = float(t[0]), float(t[-1])
    return (t0 + (t1 - t0) / 3.0, t1)


def _window_mask(t: np.ndarray, window) -> np.ndarray:
    lo, hi = window
    eps = 1e-9 * max(1.0, abs(hi))
    return (t >= lo - eps) & (t <= hi + eps)


def _ols(x: np.ndarray, y: np.ndarray):
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    sst = np.sum((y - ym) ** 2)
    r2 = 1.0 if sst == 0 else max(0.0, 1.0 - np.sum(resid**2) / sst)
    dof = len(x) - 2
    se = math.sqrt(np.sum(resid**2) / dof / sxx) if dof > 0 else float("nan")
    return float(slope), float(intercept), float(r2), se


def estimate_rate(
    times,
    values,
    window: Optional[tuple[float, float]] = None,
    statistic_kind: str = "mean_square",
    theoretical_decay: Optional[float] = None,
    min_points: int = 10,
) -> StabilityReport:
    """OLS slope of ``log(values)`` against ``times`` inside ``window``."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise ValueError("times and values must be 1-D arrays of equal length")
    window = default_window(t) if window is None else (float(window[0]), float(window[1]))
    if window[0] >= window[1]:
        raise ValueError(f"empty window {window}")
    mask = _window_mask(t, window)
    if mask.sum() < min_points:
        raise ValueError(f"window {window} holds {int(mask.sum())} points, need >= {min_points}")
    vw = v[mask]
    if not np.all(np.isfinite(vw)) or np.any(vw <= 0):
        raise ValueError("series must be finite and positive inside the window")
    slope, _, r2, _ = _ols(t[mask], np.log(vw))
    return StabilityReport(
        empirical_rate=slope,
        r_squared=r2,
        window=window,
        statistic_kind=statistic_kind,
        n_points=int(mask.sum()),
        theoretical_decay=theoretical_decay,
    )


@dataclass(frozen=True)
class PathwiseReport:
    """Distribution of per-path slopes of log((1/N) sum |Y^i|^2)."""

    slopes: np.ndarray
    window: tuple[float, float]
    theoretical_decay: Optional[float] = None

    @property
    def median(self) -> float:
        return float(np.median(self.slopes))

    @property
    def min(self) -> float:
        return float(np.min(self.slopes))

    @property
    def max(self) -> float:
        return float(np.max(self.slopes))

    @property
    def all_negative(self) -> bool:
        return bool(np.all(self.slopes < 0))


def pathwise_rates(times, per_path, window=None, theoretical_decay=None) -> PathwiseReport:
    """``per_path`` has shape (steps, paths); one regression per column."""
    per_path = np.asarray(per_path, dtype=float)
    window = default_window(times) if window is None else tuple(window)
    slopes = np.array(
        [estimate_rate(times, per_path[:, p], window).empirical_rate for p in range(per_path.shape[1])]
    )
    return PathwiseReport(slopes=slopes, window=window, theoretical_decay=theoretical_decay)


# --- explicit EM, mean square ---------------------------------------------


def ms_stepsize_bound(a1: float, a2: float, b1: float, b2: float) -> float:
    """Delta_0 = min(Delta_1, Delta_2, 1) for the mean-square rate equation."""
    if not a1 > a2:
        raise RateDomainError(f"need a1 > a2, got a1={a1}, a2={a2}")
    B, A = b1 + b2, a1 - a2
    d1 = A / B if B > 0 else math.inf
    # Smallest positive root of B t^2 - A t + 1 (inf when it stays positive).
    if B == 0:
        d2 = 1.0 / A
    else:
        disc = A * A - 4.0 * B
        d2 = math.inf if disc < 0 else (A - math.sqrt(disc)) / (2.0 * B)
    return min(d1, d2, 1.0)


def _ms_base(dt, a1, a2, b1, b2) -> float:
    return (b1 + b2) * dt * dt + (a2 - a1) * dt


def ms_rate_equation(dt: float, a1: float, a2: float, b1: float, b2: float) -> tuple[float, float]:
    """Root lambda* > 1 of lambda^dt ((b1+b2) dt^2 + (a2-a1) dt + 1) = 1 and theta* = log lambda*."""
    bound = ms_stepsize_bound(a1, a2, b1, b2)
    if not 0 < dt < bound:
        raise RateDomainError(f"dt={dt} outside (0, {bound:.6g})")
    theta = -math.log1p(_ms_base(dt, a1, a2, b1, b2)) / dt
    return math.exp(theta), theta


def _root_log_lambda(residual, hi: float = 1.0) -> float:
    # Bracket the root in s = log(lambda) on (0, inf), then refine.
    while residual(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            raise RateDomainError("no root found")
    return brentq(residual, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)


def ms_rate_root(dt: float, a1: float, a2: float, b1: float, b2: float) -> float:
    """theta* by root-finding on h(lambda), independent of the closed form."""
    ms_stepsize_bound(a1, a2, b1, b2)
    c = math.log1p(_ms_base(dt, a1, a2, b1, b2))
    # sign(h(e^s)) = sign(expm1(dt s + log(...)))
    return _root_log_lambda(lambda s: math.expm1(dt * s + c))


# --- explicit EM, almost sure ----------------------------------------------


def _smallest_positive_root(coeffs) -> float:
    roots = np.roots(np.asarray(coeffs, dtype=float))
    real = [r.real for r in roots if abs(r.imag) <= 1e-12 * max(1.0, abs(r)) and r.real > 0]
    return float(min(real)) if real else math.inf


def as_stepsize_bounds(b1: float, b2: float, c1: float, c2: float) -> dict:
    """Delta-bar bounds 1..3 and their minimum with 1 for the almost-sure rate."""
    if not c1 > c2:
        raise RateDomainError(f"need c1 > c2, got c1={c1}, c2={c2}")
    d1 = _smallest_positive_root([b1, -c1, 1.0])
    d2 = c1 / b1 if b1 > 0 else math.inf
    cubic = [
        2.0 * b1 * b1,
        -(b1 * c2 + c1 * b2 + 3.0 * b1 * c1),
        2.0 * b1 + 2.0 * b2 + c1 * c1,
        c2 - c1,
    ]
    d3 = _smallest_positive_root(cubic)
    return {"d1": d1, "d2": d2, "d3": d3, "d0": min(d1, d2, d3, 1.0)}


def as_rate_equation(dt: float, b1: float, b2: float, c1: float, c2: float) -> tuple[float, float]:
    """vartheta* (root of f) and xi* = log vartheta* - (b2 dt + c2) / (1 + b1 dt^2 - c1 dt)."""
    bound = as_stepsize_bounds(b1, b2, c1, c2)["d0"]
    if not 0 < dt < bound:
        raise RateDomainError(f"dt={dt} outside (0, {bound:.6g})")
    base = 1.0 + b1 * dt * dt - c1 * dt
    tau = -math.log(base) / dt
    return math.exp(tau), tau - (b2 * dt + c2) / base


def as_rate_root(dt: float, b1: float, b2: float, c1: float, c2: float) -> float:
    """xi* via root-finding on f(lambda) and the definition xi = tau - lambda^-dt (b2 dt + c2)."""
    as_stepsize_bounds(b1, b2, c1, c2)
    c = math.log1p(b1 * dt * dt - c1 * dt)
    tau = _root_log_lambda(lambda s: math.expm1(dt * s + c))
    return tau - math.exp(dt * tau) * (b2 * dt + c2)


# --- backward EM ---------------------------------------------------------


def bem_rate_equation(dt: float, ct1: float, ct2: float, h1: float, h2: float) -> tuple[float, float]:
    """eta* = (1 + (h1 - ct1) dt)^(-1/dt) and beta* = log eta* - (ct2 + h2) / (1 + (h1 - ct1) dt)."""
    if not ct1 > h1 + ct2 + h2:
        raise RateDomainError(f"need ct1 > h1 + ct2 + h2, got {ct1} <= {h1 + ct2 + h2}")
    base = 1.0 + (h1 - ct1) * dt
    if not dt > 0 or not base > 0:
        raise RateDomainError(f"need dt > 0 and 1 + (h1 - ct1) dt > 0, got dt={dt}")
    kappa = -math.log(base) / dt
    return math.exp(kappa), kappa - (ct2 + h2) / base


def bem_rate_root(dt: float, ct1: float, ct2: float, h1: float, h2: float) -> float:
    """beta* via root-finding on g~(lambda)."""
    bem_rate_equation(dt, ct1, ct2, h1, h2)
    c = math.log1p((h1 - ct1) * dt)
    kappa = _root_log_lambda(lambda s: math.expm1(dt * s + c))
    return kappa - math.exp(dt * kappa) * (ct2 + h2)


def bem_ms_rate(l1: float, l2: float, d2: float) -> float:
    """Stepsize-free mean-square decay rate l1 - l2 - 2 d2 of the backward scheme."""
    rate = l1 - l2 - 2.0 * d2
    if not rate > 0:
        raise RateDomainError(f"need l1 > l2 + 2 d2, got {l1} <= {l2 + 2 * d2}")
    return rate


# --- propagation of chaos ------------------------------------------------


def _check_dq(d: int, q: float):
    if d < 1:
        raise ValueError("d must be >= 1")
    if not q > 2:
        raise ValueError(f"q must be > 2, got {q}")
    if d <= 4 and q == 4:
        raise ValueError("q = 4 is excluded for d <= 4")
    if d > 4 and math.isclose(q, d / (d - 2)):
        raise ValueError(f"q = d/(d-2) = {d / (d - 2):g} is excluded for d = {d}")


def phi_of_n(n, d: int, q: float):
    """Three-branch rate function of the particle count."""
    _check_dq(d, q)
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise ValueError("N must be >= 1")
    tail = n ** (-(q - 2.0) / q)
    if d < 4:
        out = n**-0.5 + tail
    elif d == 4:
        out = n**-0.5 * np.log1p(n) + tail
    else:
        out = n ** (-2.0 / d) + tail
    return float(out) if out.ndim == 0 else out


def theoretical_chaos_exponent(d: int, q: float) -> float:
    """Leading large-N exponent of Phi(N), ignoring the d = 4 log factor."""
    _check_dq(d, q)
    lead = 0.5 if d <= 4 else 2.0 / d
    return -min(lead, (q - 2.0) / q)


@dataclass(frozen=True)
class ChaosReport:
    n_values: tuple
    errors: tuple
    slope: float
    slope_se: float
    prefactor: float
    theoretical_exponent: float
    q: float
    d: int
    t_eval: Optional[float] = None
    r_squared: float = float("nan")


def fit_chaos_rate(
    n_values: Sequence[int],
    errors: Sequence[float],
    d: int = 1,
    q: float = 8.0,
    t_eval: Optional[float] = None,
) -> ChaosReport:
    """Least squares of log e_N on log N. The prefactor absorbs every unknown constant."""
    n = np.asarray(n_values, dtype=float)
    e = np.asarray(errors, dtype=float)
    if n.shape != e.shape or n.ndim != 1:
        raise ValueError("n_values and errors must be equal-length 1-D sequences")
    if len(np.unique(n)) < 4:
        raise ValueError("need at least 4 distinct N values")
    if np.any(n < 1) or not np.all(np.isfinite(e)) or np.any(e <= 0):
        raise ValueError("need N >= 1 and finite positive errors")
    slope, intercept, r2, se = _ols(np.log(n), np.log(e))
    return ChaosReport(
        n_values=tuple(int(v) for v in n),
        errors=tuple(float(v) for v in e),
        slope=slope,
        slope_se=se,
        prefactor=math.exp(intercept),
        theoretical_exponent=theoretical_chaos_exponent(d, q),
        q=float(q),
        d=int(d),
        t_eval=t_eval,
        r_squared=r2,
    )
