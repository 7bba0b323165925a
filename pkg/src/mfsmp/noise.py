"""Counter-based Gaussian noise.

Every normal variate is a pure function of ``(seed, particle, step, component)``,
so the increments a particle sees do not depend on the ensemble size, on the
order particles are processed in, or on how work is split across threads.
"""

from __future__ import annotations

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_TWO_53 = float(2**53)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _seed_key(seed: int) -> np.uint64:
    return _mix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) + _GOLDEN)[0]


def _uniform(key, particles, step, comps, stream):
    counter = (np.uint64(step) << np.uint64(32)) | particles[:, None]
    tag = (comps[None, :] << np.uint64(1)) | np.uint64(stream)
    h = _mix64(_mix64(counter ^ key) + tag * _GOLDEN)
    # 53-bit mantissa in (0, 1]
    return ((h >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO_53


def standard_normals(seed: int, particles, step: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(len(particles), dim)`` for one time step."""
    particles = np.asarray(particles, dtype=np.uint64)
    comps = np.arange(dim, dtype=np.uint64)
    key = _seed_key(int(seed))
    with np.errstate(over="ignore"):
        u1 = _uniform(key, particles, step, comps, 0)
        u2 = _uniform(key, particles, step, comps, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def step_normals(seed: int, n_particles: int, step: int, dim: int,
                 antithetic: bool = False, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Normals for particles ``start:stop`` of an ensemble of ``n_particles``.

    With ``antithetic`` the second half of the ensemble mirrors the first:
    particle ``i + N//2`` receives the negated draws of particle ``i``.  For odd
    ``N`` the last particle keeps its own draws.
    """
    stop = n_particles if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    if not antithetic:
        return standard_normals(seed, idx, step, dim)
    half = n_particles // 2
    mirrored = (idx >= half) & (idx < 2 * half)
    source = np.where(mirrored, idx - half, idx)
    z = standard_normals(seed, source, step, dim)
    z[mirrored] *= -1.0
    return z


def derive_seed(seed: int, *labels: int) -> int:
    """Deterministic child seed for independent replicate streams."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(lab) & 0xFFFFFFFFFFFFFFFF for lab in labels)]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> np.uint64(1))
