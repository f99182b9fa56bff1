"""Sampled checks of the dissipativity and growth conditions a model claims.

Sampling cannot prove a statement quantified over all states and measures.
:func:`check_assumption` is a falsifier: a failure comes with a concrete
witness, a pass only means no sample violated the inequality.

Every condition is reduced to one or more linear forms in two constants,

    lower:  lhs <= -P * u + S * v      (P to maximise, S to keep small)
    upper:  lhs <=  U1 * u + U2 * v
    const:  lhs <=  C
    ratio:  lhs <=  D * v

with ``u`` a squared state norm and ``v`` a squared Wasserstein distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .measure import MeasureView, tree_mean, w2_batch
from .model import ModelSpec

log = logging.getLogger(__name__)

ASSUMPTIONS = ("A2.1", "A2.2", "A5.1", "A5.2", "A6.1", "A6.2", "A6.3")

# Constants that bound growth from above; the radius sweep watches these.
_UPPER_NAMES = ("K2", "a2", "b1", "b2", "c2", "C0", "l2", "d2", "ct2", "h1", "h2")


class UnsupportedAssumption(ValueError):
    pass


class Infeasible(ValueError):
    def __init__(self, message: str, witness: Optional["Witness"] = None):
        super().__init__(message)
        self.witness = witness


@dataclass(frozen=True)
class AssumptionCheckConfig:
    samples: int = 10_000
    radius: float = 10.0
    atoms: int = 16
    slack: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.atoms < 1:
            raise ValueError("atoms must be >= 1")


@dataclass
class SampleSet:
    x: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    family: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(
            *(np.concatenate([getattr(self, k), getattr(other, k)]) for k in ("x", "y", "mu", "nu", "family"))
        )


def _ball(rng: np.random.Generator, shape: tuple, d: int, radius) -> np.ndarray:
    g = rng.standard_normal(shape + (d,))
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    norm[norm == 0] = 1.0
    r = np.asarray(radius)[..., None] * rng.random(shape + (1,)) ** (1.0 / d)
    return g / norm * r


def draw_samples(d: int, cfg: AssumptionCheckConfig) -> SampleSet:
    """Random tuples plus structured families that hit equality cases.

    family 0: independent random x, y and clouds of random centre and spread
    family 1: mu = nu = delta_0
    family 2: mu = delta_x, nu = delta_y
    family 3: nu = mu + s and y = x - c s, so W2(mu, nu) = |s|
    """
    rng = np.random.default_rng(cfg.seed)
    S, A, R = cfg.samples, cfg.atoms, cfg.radius
    fam = np.zeros(S, dtype=np.int64)
    n1, n2 = S // 10, S // 5
    n3 = S // 5
    fam[S - n1 - n2 - n3 : S - n2 - n3] = 1
    fam[S - n2 - n3 : S - n3] = 2
    fam[S - n3 :] = 3

    x = _ball(rng, (S,), d, R)
    y = _ball(rng, (S,), d, R)
    centre = _ball(rng, (S,), d, R)
    spread = R * rng.random(S)
    mu = centre[:, None, :] + _ball(rng, (S, A), d, np.broadcast_to(spread[:, None], (S, A)))
    nu = _ball(rng, (S,), d, R)[:, None, :] + _ball(rng, (S, A), d, np.broadcast_to(spread[:, None], (S, A)))

    m1 = fam == 1
    mu[m1] = 0.0
    nu[m1] = 0.0
    m2 = fam == 2
    mu[m2] = x[m2][:, None, :]
    nu[m2] = y[m2][:, None, :]
    m3 = fam == 3
    shift = _ball(rng, (int(m3.sum()),), d, R / 2)
    c = rng.uniform(-2.0, 2.0, size=(int(m3.sum()), 1))
    nu[m3] = mu[m3] + shift[:, None, :]
    y[m3] = x[m3] - c * shift
    return SampleSet(x=x, y=y, mu=mu, nu=nu, family=fam)


# --- per-assumption linear forms --------------------------------------------


@dataclass(frozen=True)
class Part:
    name: str
    kind: str
    constants: tuple
    evaluate: Callable


def _sq(v):
    return np.sum(v * v, axis=-1)


def _fro2(s):
    return np.sum(s * s, axis=(-2, -1))


def _coeffs(model: ModelSpec, x, atoms):
    mu = MeasureView(atoms)
    xx = x[:, None, :]
    b = np.broadcast_to(model.drift(xx, mu, None), xx.shape)[:, 0]
    s = model.diffusion(xx, mu)[:, 0]
    return b, s


def _w2_0(atoms):
    return tree_mean(_sq(atoms), axis=-1)


def _a21(model, smp, q):
    bx, sx = _coeffs(model, smp.x, smp.mu)
    by, sy = _coeffs(model, smp.y, smp.nu)
    dx = smp.x - smp.y
    lhs = 2 * np.sum(dx * (bx - by), axis=-1) + _fro2(sx - sy)
    return lhs, _sq(dx), w2_batch(smp.mu, smp.nu) ** 2


def _dissip(mult):
    def ev(model, smp, q):
        b, s = _coeffs(model, smp.x, smp.mu)
        k = mult(model, q)
        lhs = 2 * np.sum(smp.x * b, axis=-1) + (k * _fro2(s) if k else 0.0)
        return lhs, _sq(smp.x), _w2_0(smp.mu)

    return ev


def _a51(model, smp, q):
    b, _ = _coeffs(model, smp.x, smp.mu)
    return _sq(b), _sq(smp.x), _w2_0(smp.mu)


def _a61(model, smp, q):
    zero = np.zeros_like(smp.x)
    b, s = _coeffs(model, zero, smp.mu)
    lhs = np.sqrt(_sq(b)) + np.sqrt(_fro2(s))
    return lhs, np.zeros_like(lhs), np.zeros_like(lhs)


def _split(model):
    if model.diffusion_state is None or model.diffusion_measure is None:
        raise UnsupportedAssumption(f"model {model.name!r} does not declare a diffusion split")
    return model.diffusion_state, model.diffusion_measure


def _a62_state(model, smp, q):
    s1, _ = _split(model)
    b, _ = _coeffs(model, smp.x, smp.mu)
    p0 = model.constants.p0 if model.constants.p0 is not None else 3.0
    sig = s1(smp.x[:, None, :])[:, 0]
    lhs = 2 * np.sum(smp.x * b, axis=-1) + (p0 - 1) * _fro2(sig)
    return lhs, _sq(smp.x), _w2_0(smp.mu)


def _a62_measure(model, smp, q):
    _, s2 = _split(model)
    sig = s2(MeasureView(smp.mu))[:, 0]
    lhs = _fro2(sig)
    return lhs, np.zeros_like(lhs), _w2_0(smp.mu)


def _a63_noise(model, smp, q):
    _, s = _coeffs(model, smp.x, smp.mu)
    return model.m * _fro2(s), _sq(smp.x), _w2_0(smp.mu)


PARTS: dict[str, tuple[Part, ...]] = {
    "A2.1": (Part("A2.1", "lower", ("K1", "K2"), _a21),),
    "A2.2": (Part("A2.2", "lower", ("a1", "a2"), _dissip(lambda m, q: q - 1)),),
    "A5.1": (Part("A5.1", "upper", ("b1", "b2"), _a51),),
    "A5.2": (Part("A5.2", "lower", ("c1", "c2"), _dissip(lambda m, q: m.m)),),
    "A6.1": (Part("A6.1", "const", ("C0",), _a61),),
    "A6.2": (
        Part("A6.2 state", "lower", ("l1", "l2"), _a62_state),
        Part("A6.2 measure", "ratio", ("d2",), _a62_measure),
    ),
    "A6.3": (
        Part("A6.3 drift", "lower", ("ct1", "ct2"), _dissip(lambda m, q: 0)),
        Part("A6.3 noise", "upper", ("h1", "h2"), _a63_noise),
    ),
}


def _parts(assumption: str) -> tuple[Part, ...]:
    try:
        return PARTS[assumption]
    except KeyError:
        raise UnsupportedAssumption(f"unknown assumption {assumption!r}; choose from {ASSUMPTIONS}") from None


def _rhs(kind: str, consts, u, v):
    if kind == "lower":
        return -consts[0] * u + consts[1] * v
    if kind == "upper":
        return consts[0] * u + consts[1] * v
    if kind == "const":
        return np.full_like(u, consts[0])
    return consts[0] * v


def _q(model: ModelSpec) -> float:
    return float(model.constants.q) if model.constants.q is not None else 2.0


# --- checking ----------------------------------------------------------


@dataclass(frozen=True)
class Witness:
    index: int
    part: str
    x: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    lhs: float
    rhs: float

    @property
    def excess(self) -> float:
        return self.lhs - self.rhs


@dataclass(frozen=True)
class CheckResult:
    assumption: str
    passed: bool
    constants: dict
    samples: int
    radius: float
    witness: Optional[Witness] = None
    note: str = "sampled falsifier: a pass is evidence, not proof"

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


def violations(lhs, rhs, slack: float) -> np.ndarray:
    """Mask of samples where ``lhs`` exceeds ``rhs`` beyond a scale-aware slack."""
    return lhs - rhs > slack * (1.0 + np.abs(lhs) + np.abs(rhs))


def _first_witness(part, smp, lhs, rhs, slack) -> Optional[Witness]:
    bad = np.flatnonzero(violations(lhs, rhs, slack))
    if not len(bad):
        return None
    i = int(bad[0])
    return Witness(i, part.name, smp.x[i], smp.y[i], smp.mu[i], smp.nu[i], float(lhs[i]), float(rhs[i]))


def _check_on(model: ModelSpec, assumption: str, smp: SampleSet, cfg: AssumptionCheckConfig, consts: dict):
    q = _q(model)
    for part in _parts(assumption):
        lhs, u, v = part.evaluate(model, smp, q)
        rhs = _rhs(part.kind, [consts[n] for n in part.constants], u, v)
        w = _first_witness(part, smp, lhs, rhs, cfg.slack)
        if w is not None:
            return w
    return None


def check_assumption(model: ModelSpec, assumption: str, cfg: AssumptionCheckConfig | None = None) -> CheckResult:
    """Evaluate one condition on sampled tuples with the model's declared constants.

    Raises :class:`~mvparticles.model.MissingConstants` when the model makes
    no claim for the condition.
    """
    cfg = cfg or AssumptionCheckConfig()
    names = [n for p in _parts(assumption) for n in p.constants]
    values = model.constants.require(*names)
    consts = dict(zip(names, values))
    smp = draw_samples(model.d, cfg)
    witness = _check_on(model, assumption, smp, cfg, consts)
    return CheckResult(
        assumption=assumption,
        passed=witness is None,
        constants=consts,
        samples=len(smp),
        radius=cfg.radius,
        witness=witness,
    )


# --- fitting -----------------------------------------------------------


def _bisect_concave(g: Callable[[float], float], lo: float, hi: float, grid: int = 64) -> float:
    """Maximiser of a concave function on [lo, hi]: coarse grid, then bisection on the slope."""
    if hi <= lo:
        return lo
    pts = lo + (hi - lo) * np.concatenate([[0.0], np.geomspace(1e-9, 1.0, grid)])
    vals = np.array([g(p) for p in pts])
    k = int(np.argmax(vals))
    a = pts[max(k - 1, 0)]
    b = pts[min(k + 1, len(pts) - 1)]
    for _ in range(200):
        if b - a <= 1e-13 * max(1.0, abs(b)):
            break
        mid = 0.5 * (a + b)
        h = 1e-9 * max(1.0, abs(mid))
        if g(mid + h) > g(mid):
            a = mid
        else:
            b = mid
    cands = [a, b, pts[k]]
    return float(max(cands, key=g))


def _fit_lower(lhs, u, v):
    pos = v > 0
    zero_v = ~pos
    if np.any(zero_v & (u == 0) & (lhs > 0)):
        i = int(np.flatnonzero(zero_v & (u == 0) & (lhs > 0))[0])
        raise Infeasible("a sample with x = 0 and a Dirac-at-zero measure violates every constant pair", i)
    caps = -lhs[zero_v & (u > 0)] / u[zero_v & (u > 0)]
    p_max = float(caps.min()) if caps.size else np.inf
    if p_max < 0:
        i = int(np.flatnonzero(zero_v & (u > 0))[int(np.argmin(caps))])
        raise Infeasible("the primary constant would have to be negative", i)
    up, vp, lp = u[pos], v[pos], lhs[pos]

    def secondary(p):
        return max(0.0, float(np.max((lp + p * up) / vp))) if vp.size else 0.0

    hi = p_max if np.isfinite(p_max) else 1e6
    p = _bisect_concave(lambda p: p - secondary(p), 0.0, hi)
    return p, secondary(p)


def _fit_upper(lhs, u, v):
    pos = v > 0
    zero_v = ~pos
    if np.any(zero_v & (u == 0) & (lhs > 0)):
        i = int(np.flatnonzero(zero_v & (u == 0) & (lhs > 0))[0])
        raise Infeasible("a sample with zero state and zero measure has a positive left side", i)
    sel = zero_v & (u > 0)
    lo = max(0.0, float(np.max(lhs[sel] / u[sel]))) if sel.any() else 0.0
    hi = max(lo, float(np.max(lhs[u > 0] / u[u > 0]))) if (u > 0).any() else lo
    up, vp, lp = u[pos], v[pos], lhs[pos]

    def secondary(c):
        return max(0.0, float(np.max((lp - c * up) / vp))) if vp.size else 0.0

    c = _bisect_concave(lambda c: -(c + secondary(c)), lo, hi)
    return c, secondary(c)


def _fit_part(part: Part, lhs, u, v) -> dict:
    if part.kind == "lower":
        p, s = _fit_lower(lhs, u, v)
        return {part.constants[0]: 0.99 * p, part.constants[1]: 1.01 * s}
    if part.kind == "upper":
        a, b = _fit_upper(lhs, u, v)
        return {part.constants[0]: 1.01 * a, part.constants[1]: 1.01 * b}
    if part.kind == "const":
        return {part.constants[0]: 1.01 * max(0.0, float(np.max(lhs)))}
    pos = v > 0
    if np.any(~pos & (lhs > 0)):
        raise Infeasible("measure part is nonzero at a Dirac-at-zero measure", int(np.flatnonzero(~pos & (lhs > 0))[0]))
    return {part.constants[0]: 1.01 * (float(np.max(lhs[pos] / v[pos])) if pos.any() else 0.0)}


def _fit_on(model: ModelSpec, assumption: str, smp: SampleSet) -> dict:
    q = _q(model)
    out = {}
    for part in _parts(assumption):
        lhs, u, v = part.evaluate(model, smp, q)
        try:
            out.update(_fit_part(part, lhs, u, v))
        except Infeasible as exc:
            i = exc.witness
            w = None
            if isinstance(i, int):
                w = Witness(i, part.name, smp.x[i], smp.y[i], smp.mu[i], smp.nu[i], float(lhs[i]), float("nan"))
            raise Infeasible(f"{part.name}: {exc}", w) from None
    return out


@dataclass
class FitResult:
    assumption: str
    constants: dict
    validated: bool
    radius_sweep: list = field(default_factory=list)


def fit_constants(
    model: ModelSpec,
    assumption: str,
    cfg: AssumptionCheckConfig | None = None,
    sweep: tuple = (1, 2, 4),
) -> FitResult:
    """Propose constants for which every sample satisfies the condition.

    Lower forms maximise the margin P - S; upper forms minimise U1 + U2.
    Each proposal is backed off by 1%, then checked on a fresh sample set
    (and refitted on the union once if that check fails). The fit is
    repeated at the radii ``cfg.radius * sweep``; an upper constant that
    more than doubles across the sweep means the growth is not of the
    required order and raises :class:`Infeasible` with a witness.
    """
    cfg = cfg or AssumptionCheckConfig()
    _parts(assumption)
    smp = draw_samples(model.d, cfg)
    consts = _fit_on(model, assumption, smp)
    fresh_cfg = AssumptionCheckConfig(cfg.samples, cfg.radius, cfg.atoms, cfg.slack, cfg.seed + 1)
    fresh = draw_samples(model.d, fresh_cfg)
    validated = _check_on(model, assumption, fresh, cfg, consts) is None
    if not validated:
        consts = _fit_on(model, assumption, smp.concat(fresh))
        recheck = AssumptionCheckConfig(cfg.samples, cfg.radius, cfg.atoms, cfg.slack, cfg.seed + 2)
        validated = _check_on(model, assumption, draw_samples(model.d, recheck), cfg, consts) is None

    sweep_rows = [(cfg.radius, dict(consts))]
    for k in sweep[1:]:
        rc = AssumptionCheckConfig(cfg.samples, cfg.radius * k, cfg.atoms, cfg.slack, cfg.seed)
        sweep_rows.append((rc.radius, _fit_on(model, assumption, draw_samples(model.d, rc))))
    base, last = sweep_rows[0][1], sweep_rows[-1][1]
    grown = [n for n in base if n in _UPPER_NAMES and last[n] > 2.0 * base[n] + 1e-9]
    if grown:
        big = AssumptionCheckConfig(cfg.samples, sweep_rows[-1][0], cfg.atoms, cfg.slack, cfg.seed)
        witness = _check_on(model, assumption, draw_samples(model.d, big), cfg, base)
        raise Infeasible(
            f"{assumption}: {', '.join(grown)} grow with the sampling radius "
            f"({', '.join(f'{n}: {base[n]:.4g} -> {last[n]:.4g}' for n in grown)})",
            witness,
        )
    return FitResult(assumption=assumption, constants=consts, validated=validated, radius_sweep=sweep_rows)
