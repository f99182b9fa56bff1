"""Coefficient interface and the built-in example models.

Coefficients are vectorised over particles and paths. A drift receives the
states ``x`` with shape ``(..., N, d)``, a measure view whose functionals
broadcast against ``x`` and, for feedback models, an
:class:`ObservationSnapshot`. It returns an array shaped like ``x``. A
diffusion returns ``(..., N, d, m)``; a drift Jacobian ``(..., N, d, d)``.
Each particle's coefficients may depend on its own state and on the
measure, never on other particles' states directly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Optional

import numpy as np


@dataclass(frozen=True)
class RateConstants:
    """Constants of the dissipativity and growth conditions a model satisfies.

    ``None`` means the model makes no claim for that condition.
    """

    K1: Optional[float] = None
    K2: Optional[float] = None
    a1: Optional[float] = None
    a2: Optional[float] = None
    q: Optional[float] = None
    b1: Optional[float] = None
    b2: Optional[float] = None
    c1: Optional[float] = None
    c2: Optional[float] = None
    C0: Optional[float] = None
    l1: Optional[float] = None
    l2: Optional[float] = None
    d2: Optional[float] = None
    p0: Optional[float] = None
    ct1: Optional[float] = None
    ct2: Optional[float] = None
    h1: Optional[float] = None
    h2: Optional[float] = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and v < 0:
                raise ValueError(f"constant {f.name} must be nonnegative, got {v}")
        if self.q is not None and self.q < 2:
            raise ValueError(f"q must be >= 2, got {self.q}")
        if self.p0 is not None and self.p0 < 3:
            raise ValueError(f"p0 must be >= 3, got {self.p0}")

    def require(self, *names: str) -> tuple[float, ...]:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise MissingConstants(missing)
        return tuple(float(getattr(self, n)) for n in names)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


class MissingConstants(KeyError):
    def __init__(self, names):
        super().__init__(f"model does not declare constants: {', '.join(names)}")
        self.names = list(names)


@dataclass(frozen=True)
class ObservationSnapshot:
    """States and particle mean held since the last observation time."""

    state_obs: np.ndarray
    mean_obs: np.ndarray
    obs_time: float


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d: int
    m: int
    drift: Callable
    diffusion: Callable
    drift_jacobian: Optional[Callable] = None
    constants: RateConstants = field(default_factory=RateConstants)
    initial_mean: float = 0.0
    initial_std: float = 1.0
    uses_observation: bool = False
    # sigma = sigma_state(x) + sigma_measure(mu); needed by the A6.2 check
    diffusion_state: Optional[Callable] = None
    diffusion_measure: Optional[Callable] = None
    # E[drift] = A*E[x] + B*mean(mu) for models whose mean has a closed ODE
    mean_field: Optional[tuple[float, float]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError(f"dimensions must be positive, got d={self.d}, m={self.m}")
        if self.initial_std < 0:
            raise ValueError("initial_std must be nonnegative")

    @property
    def initial_law(self) -> tuple[float, float]:
        return (self.initial_mean, self.initial_std)

    def with_constants(self, **changes) -> "ModelSpec":
        c = RateConstants(**{**asdict(self.constants), **changes})
        return _replace(self, constants=c)

    def with_initial(self, mean: float | None = None, std: float | None = None) -> "ModelSpec":
        return _replace(
            self,
            initial_mean=self.initial_mean if mean is None else float(mean),
            initial_std=self.initial_std if std is None else float(std),
        )


def _replace(spec: ModelSpec, **changes) -> ModelSpec:
    from dataclasses import replace

    return replace(spec, **changes)


def _col(x: np.ndarray) -> np.ndarray:
    # (..., N, 1) -> (..., N, 1, 1)
    return x[..., None]


def preset_opinion(f: float = 1.0, g: float = 2.5, sigma: float = 1.0) -> ModelSpec:
    """Opinion dynamics with a stubborn agent: b = f(mean - x) - g x, sigma(x) = sigma x."""
    f, g, sigma = float(f), float(g), float(sigma)

    def drift(x, mu, obs=None):
        return f * (mu.mean() - x) - g * x

    def diffusion(x, mu):
        return _col(sigma * x)

    def jac(x, mu):
        return np.full(x.shape + (1,), -(f + g))

    constants = RateConstants()
    if (f, g, sigma) == (1.0, 2.5, 1.0):
        constants = RateConstants(K1=5, K2=1, a1=5, a2=1, q=2, b1=7, b2=2, c1=5, c2=1)
    return ModelSpec(
        name="opinion",
        d=1,
        m=1,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=jac,
        constants=constants,
        initial_mean=2.0,
        initial_std=1.0,
        diffusion_state=lambda x: _col(sigma * x),
        diffusion_measure=lambda mu: _col(np.zeros_like(mu.mean())),
        mean_field=(-(f + g), f),
        params={"f": f, "g": g, "sigma": sigma},
    )


def preset_linear() -> ModelSpec:
    """b = -3.5 x + mean, sigma = x + mean / 2."""

    def drift(x, mu, obs=None):
        return -3.5 * x + mu.mean()

    def diffusion(x, mu):
        return _col(x + 0.5 * mu.mean())

    def jac(x, mu):
        return np.full(x.shape + (1,), -3.5)

    # 3 x m <= 2 x^2 + (9/8) m^2 gives both conditions with the same pair.
    constants = RateConstants(K1=4, K2=1.375, a1=4, a2=1.375, q=2)
    return ModelSpec(
        name="linear",
        d=1,
        m=1,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=jac,
        constants=constants,
        initial_mean=2.0,
        initial_std=1.0,
        diffusion_state=lambda x: _col(x),
        diffusion_measure=lambda mu: _col(0.5 * mu.mean()),
        mean_field=(-3.5, 1.0),
    )


def preset_feedback(k1: float = 0.0, k2: float = 0.0, delta_obs: float = 0.05) -> ModelSpec:
    """b = 2x + mean - k1 x_obs - k2 mean_obs, sigma = x, with held observations."""
    if not delta_obs > 0:
        raise ValueError(f"delta_obs must be positive, got {delta_obs}")
    k1, k2 = float(k1), float(k2)

    def drift(x, mu, obs=None):
        out = 2.0 * x + mu.mean()
        if obs is not None and (k1 or k2):
            out = out - k1 * obs.state_obs - k2 * obs.mean_obs
        return out

    def diffusion(x, mu):
        return _col(x)

    def jac(x, mu):
        return np.full(x.shape + (1,), 2.0)

    return ModelSpec(
        name="feedback",
        d=1,
        m=1,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=jac,
        initial_mean=2.0,
        initial_std=1.0,
        uses_observation=True,
        diffusion_state=lambda x: _col(x),
        diffusion_measure=lambda mu: _col(np.zeros_like(mu.mean())),
        params={"k1": k1, "k2": k2, "delta_obs": float(delta_obs)},
    )


def preset_cubic(rho1: float = 0.0, rho2: float = 1.0) -> ModelSpec:
    """b = -2x^3 - 4x + sin(mean), sigma = rho1 x + rho2 x^2 + sin(mean)."""
    rho1, rho2 = float(rho1), float(rho2)

    def drift(x, mu, obs=None):
        return -2.0 * x**3 - 4.0 * x + np.sin(mu.mean())

    def diffusion(x, mu):
        return _col(rho1 * x + rho2 * x**2 + np.sin(mu.mean()))

    def jac(x, mu):
        return (-6.0 * x**2 - 4.0)[..., None]

    return ModelSpec(
        name="cubic",
        d=1,
        m=1,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=jac,
        # |b(0, mu)| + |sigma(0, mu)| = 2 |sin(mean)| <= 2
        constants=RateConstants(C0=2),
        initial_mean=0.0,
        initial_std=2.0,
        diffusion_state=lambda x: _col(rho1 * x + rho2 * x**2),
        diffusion_measure=lambda mu: _col(np.sin(mu.mean())),
        params={"rho1": rho1, "rho2": rho2},
    )


def zero_model(d: int = 1, m: int = 1) -> ModelSpec:
    """b = 0, sigma = 0. Every cloud is a fixed point."""

    return ModelSpec(
        name="zero",
        d=d,
        m=m,
        drift=lambda x, mu, obs=None: np.zeros_like(x),
        diffusion=lambda x, mu: np.zeros(x.shape + (m,)),
        drift_jacobian=lambda x, mu: np.zeros(x.shape + (d,)),
        diffusion_state=lambda x: np.zeros(x.shape + (m,)),
        diffusion_measure=lambda mu: np.zeros(mu.mean().shape + (m,)),
        mean_field=(0.0, 0.0),
    )


PRESETS: dict[str, Callable[..., ModelSpec]] = {
    "opinion": preset_opinion,
    "linear": preset_linear,
    "feedback": preset_feedback,
    "cubic": preset_cubic,
    "zero": zero_model,
}


def get_preset(name: str, params: dict[str, Any] | None = None) -> ModelSpec:
    """Build a preset by name; ``initial_mean`` / ``initial_std`` override the initial law."""
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(PRESETS)}") from None
    params = dict(params or {})
    mean = params.pop("initial_mean", None)
    std = params.pop("initial_std", None)
    spec = factory(**params)
    if mean is not None or std is not None:
        spec = spec.with_initial(mean, std)
    return spec
