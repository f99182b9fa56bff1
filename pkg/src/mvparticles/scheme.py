"""Explicit and backward Euler-Maruyama schemes for interacting particle systems.

The state of a run is an array of shape ``(P, N, d)``: P independent paths of
N particles each. One step reads the empirical measure of the current cloud
once, then moves every particle with that frozen measure. The backward scheme
is implicit in the particle's own state only; the measure stays lagged, so
the implicit equations decouple into one small solve per particle.

Paths never interact. Splitting them across worker threads changes nothing
in the output: each path's arithmetic is identical in every split, noise is
keyed per (path, particle, step), and every reduction uses a fixed tree.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import numpy as np

from . import rng
from .measure import LawView, MeasureView, ParticleCloud, tree_mean, tree_sum
from .model import ModelSpec, ObservationSnapshot

log = logging.getLogger(__name__)

KINDS = ("explicit_em", "backward_em")


class ImplicitSolveFailure(RuntimeError):
    def __init__(self, index, residual: float, iterations: int):
        super().__init__(
            f"implicit solve did not reach tolerance for particle {index}: "
            f"residual {residual:.3e} after {iterations} iterations"
        )
        self.index = index
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SchemeConfig:
    kind: str = "explicit_em"
    dt: float = 0.01
    steps: int = 100
    n: int = 100
    paths: int = 1
    seed: int = 0
    implicit_tol: float = 1e-12
    implicit_max_iter: int = 100
    obs_gap: Optional[float] = None
    divergence_threshold: float = 1e12

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0 < self.dt < 1:
            raise ValueError(f"dt must lie in (0, 1), got {self.dt}")
        if self.steps < 0 or self.n < 1 or self.paths < 1:
            raise ValueError("steps must be >= 0, n and paths >= 1")
        if self.obs_gap is not None:
            ratio = self.obs_gap / self.dt
            if self.obs_gap <= 0 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ValueError(
                    f"obs_gap must be a positive multiple of dt, got {self.obs_gap} / {self.dt}"
                )

    @classmethod
    def for_horizon(cls, horizon: float, dt: float, **kw) -> "SchemeConfig":
        return cls(dt=dt, steps=steps_for(horizon, dt), **kw)

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    @property
    def obs_every(self) -> Optional[int]:
        return None if self.obs_gap is None else int(round(self.obs_gap / self.dt))


def steps_for(horizon: float, dt: float) -> int:
    return int(math.ceil(horizon / dt - 1e-9))


@dataclass(frozen=True)
class StepRecord:
    step: int
    time: float
    mean_square: float
    mean: tuple
    max_norm: float
    implicit_iters: int
    diverged: bool


# --- kernels ---------------------------------------------------------------


def _noise_term(sigma: np.ndarray, dw: np.ndarray) -> np.ndarray:
    # sigma (..., N, d, m) times dw (..., N, m); fixed summation order over m.
    out = sigma[..., 0] * dw[..., None, 0]
    for j in range(1, dw.shape[-1]):
        out = out + sigma[..., j] * dw[..., None, j]
    return out


def _drift(model: ModelSpec, x, mu, obs):
    return np.broadcast_to(model.drift(x, mu, obs), x.shape)


def _em_advance(x, model, dt, dw, obs, mu=None):
    mu = MeasureView(x) if mu is None else mu
    return x + dt * _drift(model, x, mu, obs) + _noise_term(model.diffusion(x, mu), dw)


def _fd_jacobian(f: Callable, z: np.ndarray) -> np.ndarray:
    d = z.shape[-1]
    jac = np.empty(z.shape + (d,))
    for j in range(d):
        h = np.maximum(1e-7, 1e-7 * np.abs(z[..., j]))
        zp = z.copy()
        zm = z.copy()
        zp[..., j] += h
        zm[..., j] -= h
        jac[..., :, j] = (f(zp) - f(zm)) / (2.0 * h[..., None])
    return jac


def _linear_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] == 1:
        return b / a[..., 0]
    return np.linalg.solve(a, b[..., None])[..., 0]


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def solve_implicit(
    frozen_drift: Callable,
    dt: float,
    rhs_const: np.ndarray,
    jac: Optional[Callable] = None,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve ``z - dt * frozen_drift(z) = rhs_const`` independently for every row.

    ``rhs_const`` has shape ``(..., d)``; each leading index is a separate
    equation. Newton steps (with residual backtracking) start from
    ``rhs_const``; an equation whose Newton step is rejected twice switches to
    the damped fixed point ``z <- (1-w) z + w (rhs + dt b(z))`` with
    ``w = 1 / (1 + dt * L)``, L being the local Jacobian norm. An equation is
    frozen as soon as its residual norm is within ``tol``, so its result does
    not depend on the other equations in the batch.

    Returns ``(z, iterations, residual_norm)`` with per-equation arrays.
    Raises :class:`ImplicitSolveFailure` after ``max_iter`` iterations.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    rhs = np.asarray(rhs_const, dtype=float)
    d = rhs.shape[-1]
    eye = np.eye(d)

    def residual(z):
        return z - dt * frozen_drift(z) - rhs

    def jacobian(z):
        return jac(z) if jac is not None else _fd_jacobian(frozen_drift, z)

    z = rhs.copy()
    F = residual(z)
    r = _norm(F)
    iters = np.zeros(r.shape, dtype=np.int64)
    rejects = np.zeros(r.shape, dtype=np.int64)
    active = ~(r <= tol)
    it = 0
    while active.any() and it < max_iter:
        it += 1
        newton = active & (rejects < 2)
        fixed = active & (rejects >= 2)
        jb = jacobian(z)
        z_new = z
        if newton.any():
            step = _linear_solve(eye - dt * jb, F)
            lam = np.ones(r.shape)
            trial = z - step
            F_try = residual(trial)
            r_try = _norm(F_try)
            ok = r_try < r
            for _ in range(8):
                redo = newton & ~ok
                if not redo.any():
                    break
                lam = np.where(redo, 0.5 * lam, lam)
                trial = np.where(redo[..., None], z - lam[..., None] * step, trial)
                F_try = residual(trial)
                r_try = _norm(F_try)
                ok = r_try < r
            accept = newton & ok
            rejects = np.where(newton & ~ok, rejects + 1, rejects)
            z_new = np.where(accept[..., None], trial, z_new)
        if fixed.any():
            lip = np.sqrt(np.sum(jb * jb, axis=(-2, -1)))
            w = (1.0 / (1.0 + dt * lip))[..., None]
            fp = (1.0 - w) * z + w * (rhs + dt * frozen_drift(z))
            z_new = np.where(fixed[..., None], fp, z_new)
        iters = iters + active
        z = z_new
        F = residual(z)
        r = _norm(F)
        active = ~(r <= tol)
    if active.any():
        flat = int(np.flatnonzero(active.reshape(-1))[0])
        index = np.unravel_index(flat, active.shape)
        raise ImplicitSolveFailure(
            tuple(int(i) for i in index), float(r.reshape(-1)[flat]), it
        )
    return z, iters, r


def _bem_advance(x, model, cfg: SchemeConfig, dw, obs, mu=None):
    mu = MeasureView(x) if mu is None else mu
    rhs = x + _noise_term(model.diffusion(x, mu), dw)
    jac = None
    if model.drift_jacobian is not None:
        jac = lambda z: model.drift_jacobian(z, mu)  # noqa: E731
    return solve_implicit(
        lambda z: _drift(model, z, mu, obs),
        cfg.dt,
        rhs,
        jac=jac,
        tol=cfg.implicit_tol,
        max_iter=cfg.implicit_max_iter,
    )


def _check_noise(cloud: ParticleCloud, model: ModelSpec, noise) -> np.ndarray:
    dw = np.asarray(noise, dtype=float)
    if dw.ndim == 1:
        dw = dw[:, None]
    if dw.shape != (cloud.n, model.m):
        raise ValueError(f"noise must have shape {(cloud.n, model.m)}, got {dw.shape}")
    return dw


def _wrap(atoms, cloud: ParticleCloud, cfg: SchemeConfig) -> ParticleCloud:
    with np.errstate(over="ignore", invalid="ignore"):
        bad = _diverged(atoms[None], cfg.divergence_threshold)[0]
    return ParticleCloud(atoms, step=cloud.step + 1, dt=cfg.dt, diverged=bool(bad))


def em_step(cloud: ParticleCloud, model: ModelSpec, cfg: SchemeConfig, noise, obs=None) -> ParticleCloud:
    """One explicit step: y + b(y, mu) dt + sigma(y, mu) dW with mu read once."""
    if cloud.diverged:
        return replace(cloud, step=cloud.step + 1)
    dw = _check_noise(cloud, model, noise)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _em_advance(cloud.atoms[None], model, cfg.dt, dw[None], obs)[0]
    return _wrap(out, cloud, cfg)


def bem_step(
    cloud: ParticleCloud,
    model: ModelSpec,
    cfg: SchemeConfig,
    noise,
    obs=None,
    return_info: bool = False,
):
    """One backward step: z = y + b(z, mu_k) dt + sigma(y, mu_k) dW, mu_k lagged.

    With ``return_info`` also returns ``(iterations, residuals)`` per particle.
    """
    if cloud.diverged:
        out = replace(cloud, step=cloud.step + 1)
        return (out, None, None) if return_info else out
    dw = _check_noise(cloud, model, noise)
    z, iters, res = _bem_advance(cloud.atoms[None], model, cfg, dw[None], obs)
    out = _wrap(z[0], cloud, cfg)
    return (out, iters[0], res[0]) if return_info else out


# --- run statistics -------------------------------------------------------


def _sq_norms(x):
    return tree_sum(x * x, axis=-1)


def _diverged(x, threshold: float) -> np.ndarray:
    """Per-path flag: non-finite entry, a norm above threshold, or mean square above it."""
    sq = _sq_norms(x)
    finite = np.all(np.isfinite(x), axis=(-2, -1))
    big = np.max(sq, axis=-1) > threshold * threshold
    ms = tree_mean(sq, axis=-1) > threshold
    return ~finite | big | ms


@dataclass
class _Stats:
    mean_square: list = field(default_factory=list)
    mean: list = field(default_factory=list)
    max_norm: list = field(default_factory=list)
    iters: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    diverged: list = field(default_factory=list)

    def push(self, x, iters, residual, diverged):
        sq = _sq_norms(x)
        self.mean_square.append(tree_mean(sq, axis=-1))
        self.mean.append(tree_mean(x, axis=-2))
        self.max_norm.append(np.sqrt(np.max(sq, axis=-1)))
        self.iters.append(iters)
        self.residual.append(residual)
        self.diverged.append(diverged)


@dataclass
class SimulationResult:
    """Per-path series (first axis step, second axis path) plus path-averaged records."""

    config: SchemeConfig
    model_name: str
    times: np.ndarray
    mean_square: np.ndarray
    mean: np.ndarray
    max_norm: np.ndarray
    implicit_iters: np.ndarray
    residual: np.ndarray
    diverged: np.ndarray
    records: list
    final_states: Optional[np.ndarray] = None

    @property
    def any_diverged(self) -> bool:
        return bool(self.diverged.any())

    @property
    def path_mean_square(self) -> np.ndarray:
        return tree_mean(self.mean_square, axis=1)


def _record(k: int, dt: float, ms, mean, maxn, iters, div) -> StepRecord:
    return StepRecord(
        step=k,
        time=k * dt,
        mean_square=float(tree_mean(ms)),
        mean=tuple(float(v) for v in tree_mean(mean, axis=0)),
        max_norm=float(np.max(maxn)),
        implicit_iters=int(np.max(iters)),
        diverged=bool(np.any(div)),
    )


def _observe(x, k: int, dt: float) -> ObservationSnapshot:
    return ObservationSnapshot(state_obs=x, mean_obs=MeasureView(x).mean(), obs_time=k * dt)


def _run_chunk(model: ModelSpec, cfg: SchemeConfig, paths: np.ndarray, on_step=None, keep_final=False):
    n = cfg.n
    particles = np.arange(n)
    x = rng.initial_block(cfg.seed, paths, particles, model.d, model.initial_mean, model.initial_std)
    stats = _Stats()
    P = len(paths)
    zeros_i = np.zeros(P, dtype=np.int64)
    zeros_f = np.zeros(P)
    obs_every = cfg.obs_every if model.uses_observation else None
    if model.uses_observation and obs_every is None:
        raise ValueError(f"model {model.name!r} needs obs_gap in the scheme config")
    obs = None
    with np.errstate(over="ignore", invalid="ignore"):
        div = _diverged(x, cfg.divergence_threshold)
        stats.push(x, zeros_i, zeros_f, div)
        if on_step:
            on_step(0, stats)
        for k in range(cfg.steps):
            if div.any():
                break
            if obs_every is not None and k % obs_every == 0:
                obs = _observe(x, k, cfg.dt)
            dw = rng.brownian_block(cfg.seed, paths, particles, k, model.m, cfg.dt)
            if cfg.kind == "explicit_em":
                x = _em_advance(x, model, cfg.dt, dw, obs)
                iters, res = zeros_i, zeros_f
            else:
                x, it, r = _bem_advance(x, model, cfg, dw, obs)
                iters, res = np.max(it, axis=-1), np.max(r, axis=-1)
            div = _diverged(x, cfg.divergence_threshold)
            stats.push(x, iters, res, div)
            if on_step:
                on_step(k + 1, stats)
    return stats, (x if keep_final else None)


def _chunks(paths: int, threads: int) -> list[np.ndarray]:
    threads = max(1, min(int(threads), paths))
    return [c for c in np.array_split(np.arange(paths), threads) if len(c)]


def simulate(
    model: ModelSpec,
    cfg: SchemeConfig,
    observer: Optional[Callable[[StepRecord], None]] = None,
    threads: int = 1,
    keep_final: bool = False,
) -> SimulationResult:
    """Run ``cfg.paths`` independent interacting particle systems.

    Each path-averaged :class:`StepRecord` is passed to ``observer`` in step
    order (live when ``threads == 1``). A run stops at the first step at
    which any path is flagged diverged; that step is the last record.
    """
    chunks = _chunks(cfg.paths, threads)
    records: list[StepRecord] = []

    def emit(rec):
        records.append(rec)
        if observer is not None:
            observer(rec)

    if len(chunks) == 1:

        def live(k, s):
            emit(_record(k, cfg.dt, s.mean_square[-1], s.mean[-1], s.max_norm[-1], s.iters[-1], s.diverged[-1]))

        results = [_run_chunk(model, cfg, chunks[0], on_step=live, keep_final=keep_final)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(lambda c: _run_chunk(model, cfg, c, keep_final=keep_final), chunks))

    last = min(len(s.mean_square) for s, _ in results)
    # A chunk that diverged earlier ends the whole run there.
    ends = []
    for s, _ in results:
        hit = [k for k, dv in enumerate(s.diverged) if dv.any()]
        ends.append(hit[0] + 1 if hit else len(s.mean_square))
    last = min(ends + [last])

    def cat(name):
        return np.concatenate([np.stack(getattr(s, name)[:last]) for s, _ in results], axis=1)

    ms, mean, maxn = cat("mean_square"), cat("mean"), cat("max_norm")
    iters, res, div = cat("iters"), cat("residual"), cat("diverged")
    if len(chunks) > 1:
        for k in range(last):
            emit(_record(k, cfg.dt, ms[k], mean[k], maxn[k], iters[k], div[k]))
    elif len(records) > last:
        del records[last:]
    finals = None
    if keep_final and last == cfg.steps + 1:
        finals = np.concatenate([f for _, f in results], axis=0)
    return SimulationResult(
        config=cfg,
        model_name=model.name,
        times=np.arange(last) * cfg.dt,
        mean_square=ms,
        mean=mean,
        max_norm=maxn,
        implicit_iters=iters,
        residual=res,
        diverged=div,
        records=records,
        final_states=finals,
    )


# --- coupled runs for propagation of chaos --------------------------------


@dataclass
class CoupledResult:
    """``errors[i, k]`` is the path average of (1/N) sum |X^j - X^{j,N}|^2 at step k for N = n_list[i]."""

    n_list: list
    times: np.ndarray
    errors: np.ndarray
    per_path: np.ndarray
    reference: str
    n_ref: Optional[int]


def _reference_mean_step(m, A: float, B: float, dt: float, kind: str):
    # Law mean of the discretised non-interacting system.
    if kind == "explicit_em":
        return m * (1.0 + dt * (A + B))
    return m * (1.0 + B * dt) / (1.0 - A * dt)


def _run_coupled_chunk(model, cfg, paths, n_list, n_ref):
    n_all = n_ref if n_ref is not None else max(n_list)
    particles = np.arange(n_all)
    x0 = rng.initial_block(cfg.seed, paths, particles, model.d, model.initial_mean, model.initial_std)
    ref = x0
    systems = [x0[:, :n].copy() for n in n_list]
    law_mean = np.full((1, 1, model.d), float(model.initial_mean))
    P = len(paths)
    errors = [[np.zeros(P)] for _ in n_list]
    obs_every = cfg.obs_every if model.uses_observation else None
    obs_ref = None
    obs_sys = [None] * len(n_list)

    def advance(x, dw, obs, mu=None):
        if cfg.kind == "explicit_em":
            return _em_advance(x, model, cfg.dt, dw, obs, mu)
        return _bem_advance(x, model, cfg, dw, obs, mu)[0]

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(cfg.steps):
            if obs_every is not None and k % obs_every == 0:
                obs_ref = _observe(ref, k, cfg.dt)
                obs_sys = [_observe(x, k, cfg.dt) for x in systems]
            dw = rng.brownian_block(cfg.seed, paths, particles, k, model.m, cfg.dt)
            if n_ref is None:
                A, B = model.mean_field
                ref = advance(ref, dw, None, LawView(law_mean))
                law_mean = _reference_mean_step(law_mean, A, B, cfg.dt, cfg.kind)
            else:
                ref = advance(ref, dw, obs_ref)
            for i, n in enumerate(n_list):
                if n_ref is not None and n == n_ref:
                    systems[i] = ref
                else:
                    systems[i] = advance(systems[i], dw[:, :n], obs_sys[i])
                diff = ref[:, :n] - systems[i]
                errors[i].append(tree_mean(_sq_norms(diff), axis=-1))
    return np.array([np.stack(e) for e in errors])


def simulate_coupled(
    model: ModelSpec,
    cfg: SchemeConfig,
    n_list: Iterable[int],
    n_ref: Optional[int] = None,
    threads: int = 1,
) -> CoupledResult:
    """Interacting systems of each size against a non-interacting reference.

    All systems share the Brownian increments and initial values of particle
    j. Models with a closed mean ODE (``model.mean_field``) use the exact
    discretised law mean as the reference measure; otherwise (or when
    ``n_ref`` is given) the reference is an interacting run with ``n_ref``
    particles, default ``8 * max(n_list)``.
    """
    n_list = [int(n) for n in n_list]
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be nonempty and strictly ascending")
    if n_ref is None and model.mean_field is None:
        n_ref = 8 * max(n_list)
    if n_ref is not None and n_ref < max(n_list):
        raise ValueError("n_ref must be at least max(n_list)")
    chunks = _chunks(cfg.paths, threads)
    if len(chunks) == 1:
        parts = [_run_coupled_chunk(model, cfg, chunks[0], n_list, n_ref)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda c: _run_coupled_chunk(model, cfg, c, n_list, n_ref), chunks))
    per_path = np.concatenate(parts, axis=2)
    return CoupledResult(
        n_list=n_list,
        times=np.arange(cfg.steps + 1) * cfg.dt,
        errors=tree_mean(per_path, axis=2),
        per_path=per_path,
        reference="mean_ode" if n_ref is None else "proxy",
        n_ref=n_ref,
    )
