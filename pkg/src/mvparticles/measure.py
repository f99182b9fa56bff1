"""Empirical measures over equal-weight particle clouds.

All sums go through :func:`tree_sum`, a balanced binary reduction whose
topology depends only on the number of summands. Results are therefore
bit-identical no matter how paths are split between workers or how the
particles are batched.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment


class DivergedCloudError(ValueError):
    """Raised when a functional is asked to read a diverged cloud."""


def tree_sum(a, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` with a fixed pairwise tree.

    The axis is zero-padded to the next power of two and folded in halves,
    so element ``i`` is always combined with element ``i + n/2``.
    """
    a = np.moveaxis(np.asarray(a, dtype=float), axis, -1)
    n = a.shape[-1]
    if n == 0:
        return np.zeros(a.shape[:-1])
    size = 1 << (n - 1).bit_length()
    if size != n:
        pad = np.zeros(a.shape[:-1] + (size - n,))
        a = np.concatenate([a, pad], axis=-1)
    while size > 1:
        size //= 2
        a = a[..., :size] + a[..., size:]
    return a[..., 0]


def tree_mean(a, axis: int = -1) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return tree_sum(a, axis) / a.shape[axis]


@dataclass(frozen=True)
class ParticleCloud:
    """N atoms in R^d at one time step of one path."""

    atoms: np.ndarray
    step: int = 0
    dt: float = 0.0
    diverged: bool = False

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ValueError(f"atoms must be an (N, d) array with N >= 1, got {atoms.shape}")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def time(self) -> float:
        return self.step * self.dt

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(self.d)])
        for row in self.atoms:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, step: int = 0, dt: float = 0.0) -> "ParticleCloud":
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[float(v) for v in r] for r in rows[1:]]), step=step, dt=dt)


def _checked(cloud: ParticleCloud) -> np.ndarray:
    if cloud.diverged:
        raise DivergedCloudError(f"cloud at step {cloud.step} is flagged diverged")
    return cloud.atoms


class MeasureView:
    """Read-only functionals of the empirical measure of a batch of clouds.

    ``atoms`` has shape ``(..., N, d)``; leading axes index independent
    paths. Functionals keep the particle axis with length one so they
    broadcast directly against per-particle states.
    """

    def __init__(self, atoms):
        self.atoms = np.asarray(atoms, dtype=float)
        self._mean = None

    @property
    def n(self) -> int:
        return self.atoms.shape[-2]

    def mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = tree_mean(self.atoms, axis=-2)[..., None, :]
        return self._mean

    def raw_moment(self, p: float) -> np.ndarray:
        norms = np.sqrt(tree_sum(self.atoms**2, axis=-1))
        return tree_mean(norms**p, axis=-1)[..., None]

    def w2_to_delta0(self) -> np.ndarray:
        return np.sqrt(tree_mean(tree_sum(self.atoms**2, axis=-1), axis=-1))[..., None]


class LawView:
    """Stand-in for a limit law that is known only through its mean."""

    def __init__(self, mean):
        self._mean = np.asarray(mean, dtype=float)

    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def atoms(self):
        raise AttributeError("a LawView has no atoms; only the mean is known")


def mean(cloud: ParticleCloud) -> np.ndarray:
    return tree_mean(_checked(cloud), axis=0)


def raw_moment(cloud: ParticleCloud, p: float) -> float:
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    atoms = _checked(cloud)
    norms = np.sqrt(tree_sum(atoms**2, axis=-1))
    return float(tree_mean(norms**p))


def w2_to_delta0(cloud: ParticleCloud) -> float:
    """W2 distance to the Dirac mass at the origin (root mean square norm)."""
    atoms = _checked(cloud)
    return float(np.sqrt(tree_mean(tree_sum(atoms**2, axis=-1))))


def _pair(a: ParticleCloud, b: ParticleCloud) -> tuple[np.ndarray, np.ndarray]:
    x, y = _checked(a), _checked(b)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"clouds must have equal atom counts, got {x.shape[0]} and {y.shape[0]}")
    if x.shape[1] != y.shape[1]:
        raise ValueError("clouds live in different dimensions")
    return x, y


def w2_1d(a: ParticleCloud, b: ParticleCloud) -> float:
    """Exact W2 in one dimension via the monotone (sorted) coupling."""
    x, y = _pair(a, b)
    if x.shape[1] != 1:
        raise ValueError(f"w2_1d needs d=1, got d={x.shape[1]}")
    diff = np.sort(x[:, 0]) - np.sort(y[:, 0])
    return float(np.sqrt(tree_mean(diff**2)))


def w2_assignment(a: ParticleCloud, b: ParticleCloud) -> float:
    """Exact W2 in any dimension via an optimal assignment.

    With equal weights the optimal coupling is a permutation, so this is a
    dense linear sum assignment on squared distances. Cubic in N.
    """
    x, y = _pair(a, b)
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(tree_mean(cost[rows, cols])))


def w2_bruteforce(a: ParticleCloud, b: ParticleCloud) -> float:
    """W2 by enumerating every pairing. Only for tiny N (tests)."""
    x, y = _pair(a, b)
    n = x.shape[0]
    if n > 8:
        raise ValueError("brute force is limited to N <= 8")
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
    best = min(sum(cost[i, p[i]] for i in range(n)) for p in permutations(range(n)))
    return float(np.sqrt(best / n))


def w2_samples(x: np.ndarray, y: np.ndarray) -> float:
    """W2 between two raw (N, d) atom arrays; sorting in 1D, assignment otherwise."""
    a, b = ParticleCloud(x), ParticleCloud(y)
    return w2_1d(a, b) if a.d == 1 else w2_assignment(a, b)


def w2_batch(mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """W2 between matched stacks of atom sets, shapes ``(S, N, d)``.

    Sorted coupling in one dimension, one assignment per pair otherwise.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if mu.shape != nu.shape or mu.ndim != 3:
        raise ValueError(f"need two (S, N, d) stacks of equal shape, got {mu.shape} and {nu.shape}")
    if mu.shape[-1] == 1:
        diff = np.sort(mu[..., 0], axis=-1) - np.sort(nu[..., 0], axis=-1)
        return np.sqrt(tree_mean(diff**2, axis=-1))
    return np.array([w2_assignment(ParticleCloud(a), ParticleCloud(b)) for a, b in zip(mu, nu)])
