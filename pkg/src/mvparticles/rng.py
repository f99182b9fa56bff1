"""Counter-based Gaussian noise addressed by (seed, path, particle, step, component).

Every variate is a pure function of its key: the key is encrypted with
Threefry-2x64 (20 rounds) and the first output word is mapped to a standard
normal through the exact inverse normal CDF. No generator state exists, so
any block of increments can be produced in any order, by any worker, and
two simulations with different particle counts see the same Brownian path
for the same (path, particle) pair.

Key layout::

    key     = (seed, path)
    counter = (particle, step << 8 | component)

Components are limited to 0..255 and steps to 0..2**56 - 2; the largest
step value is reserved for initial-condition draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

MASK64 = (1 << 64) - 1
COMPONENT_BITS = 8
MAX_COMPONENTS = 1 << COMPONENT_BITS
INITIAL_STEP = (1 << (64 - COMPONENT_BITS)) - 1

_ROTATIONS = (16, 42, 12, 31, 16, 32, 24, 21)
_PARITY = np.uint64(0x1BD11BDAA9FC1A22)
_U53 = np.float64(2.0**-53)


@dataclass(frozen=True)
class NoiseKey:
    seed: int
    path: int
    particle: int
    step: int
    component: int = 0


def _u64(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype != np.uint64:
        if a.dtype.kind in "iu" and a.size and a.min() < 0:
            raise ValueError("key fields must be nonnegative")
        a = a.astype(np.uint64)
    return a


def threefry2x64(c0, c1, k0, k1, rounds: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Threefry-2x64 block cipher, vectorised over broadcastable uint64 arrays."""
    c0, c1, k0, k1 = np.broadcast_arrays(_u64(c0), _u64(c1), _u64(k0), _u64(k1))
    shape = c0.shape
    c0, c1, k0, k1 = (np.array(a, ndmin=1) for a in (c0, c1, k0, k1))
    ks = (k0, k1, k0 ^ k1 ^ _PARITY)
    with np.errstate(over="ignore"):
        x0 = c0 + ks[0]
        x1 = c1 + ks[1]
        for r in range(rounds):
            rot = _ROTATIONS[r % 8]
            x0 += x1
            x1 = (x1 << np.uint64(rot)) | (x1 >> np.uint64(64 - rot))
            x1 ^= x0
            if r % 4 == 3:
                s = (r + 1) // 4
                x0 += ks[s % 3]
                x1 += ks[(s + 1) % 3] + np.uint64(s)
    return x0.reshape(shape), x1.reshape(shape)


def _threefry_flat(c0, c1, k0, k1, out):
    parity = np.uint64(0x1BD11BDAA9FC1A22)
    for i in range(c0.shape[0]):
        ks0 = k0[i]
        ks1 = k1[i]
        ks2 = ks0 ^ ks1 ^ parity
        x0 = c0[i] + ks0
        x1 = c1[i] + ks1
        for r in range(20):
            m = r % 8
            if m == 0 or m == 4:
                rot = 16
            elif m == 1:
                rot = 42
            elif m == 2:
                rot = 12
            elif m == 3:
                rot = 31
            elif m == 5:
                rot = 32
            elif m == 6:
                rot = 24
            else:
                rot = 21
            x0 = x0 + x1
            x1 = (x1 << np.uint64(rot)) | (x1 >> np.uint64(64 - rot))
            x1 = x1 ^ x0
            if r % 4 == 3:
                s = (r + 1) // 4
                j = s % 3
                if j == 0:
                    x0 = x0 + ks0
                elif j == 1:
                    x0 = x0 + ks1
                else:
                    x0 = x0 + ks2
                j = (s + 1) % 3
                if j == 0:
                    x1 = x1 + ks0 + np.uint64(s)
                elif j == 1:
                    x1 = x1 + ks1 + np.uint64(s)
                else:
                    x1 = x1 + ks2 + np.uint64(s)
        out[i] = x0


if numba is not None:
    _threefry_flat = numba.njit(cache=True, nogil=True)(_threefry_flat)


def _threefry_word0(c0, c1, k0, k1) -> np.ndarray:
    # First output word only; compiled path when numba is present.
    if numba is None:
        return threefry2x64(c0, c1, k0, k1)[0]
    arrs = np.broadcast_arrays(_u64(c0), _u64(c1), _u64(k0), _u64(k1))
    shape = arrs[0].shape
    flat = [np.ascontiguousarray(a).reshape(-1) for a in arrs]
    out = np.empty(flat[0].shape[0], dtype=np.uint64)
    _threefry_flat(*flat, out)
    return out.reshape(shape)


def _counter1(step, component) -> np.ndarray:
    step = _u64(step)
    component = _u64(component)
    if component.size and int(component.max()) >= MAX_COMPONENTS:
        raise ValueError(f"component index must be < {MAX_COMPONENTS}")
    return (step << np.uint64(COMPONENT_BITS)) | component


def _seed_word(seed: int) -> np.uint64:
    return np.uint64(int(seed) & MASK64)


def gaussian_block(seed: int, path, particle, step, component) -> np.ndarray:
    """Standard normals for broadcastable arrays of key fields."""
    x0 = _threefry_word0(particle, _counter1(step, component), _seed_word(seed), path)
    u = ((x0 >> np.uint64(11)).astype(np.float64) + 0.5) * _U53
    return ndtri(u)


def gaussian(key: NoiseKey) -> float:
    """One standard normal variate, a pure function of ``key``."""
    return float(
        gaussian_block(key.seed, key.path, key.particle, key.step, key.component)
    )


def brownian_block(
    seed: int, paths, particles, step: int, m: int, dt: float
) -> np.ndarray:
    """Increments of shape ``(len(paths), len(particles), m)`` for one step."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    p = np.asarray(paths, dtype=np.uint64)[:, None, None]
    j = np.asarray(particles, dtype=np.uint64)[None, :, None]
    c = np.arange(m, dtype=np.uint64)[None, None, :]
    return gaussian_block(seed, p, j, np.uint64(step), c) * np.sqrt(dt)


def brownian_increment(
    seed: int, path: int, particle: int, step: int, m: int, dt: float
) -> np.ndarray:
    """Brownian increment in R^m for a single particle and step."""
    return brownian_block(seed, [path], [particle], step, m, dt)[0, 0]


def initial_block(seed: int, paths, particles, d: int, mean, std) -> np.ndarray:
    """Initial states of shape ``(len(paths), len(particles), d)``.

    Uses the reserved step index, so draws never collide with increments and
    do not depend on how many particles the run has.
    """
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    p = np.asarray(paths, dtype=np.uint64)[:, None, None]
    j = np.asarray(particles, dtype=np.uint64)[None, :, None]
    c = np.arange(d, dtype=np.uint64)[None, None, :]
    z = gaussian_block(seed, p, j, np.uint64(INITIAL_STEP), c)
    if std == 0:
        return np.broadcast_to(np.asarray(mean, dtype=float), z.shape).copy()
    return np.asarray(mean, dtype=float) + std * z


def initial_sample(seed: int, path: int, particle: int, d: int, law) -> np.ndarray:
    """Initial state of one particle; ``law`` is ``(mean, std)``."""
    mean, std = law
    return initial_block(seed, [path], [particle], d, mean, std)[0, 0]
