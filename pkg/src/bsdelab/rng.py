"""Counter-based Gaussian increments.

Every normal draw is a pure function of ``(seed, path, step, component)``,
so adding paths or steps never perturbs draws that already exist and any
slice of paths can be regenerated on its own.  The hash is the SplitMix64
finalizer applied as a chained keyed mix; uniforms are mapped to normals by
the inverse CDF.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _absorb(state, counter):
    return _mix64(state + (np.asarray(counter, dtype=np.uint64) + np.uint64(1)) * _GAMMA)


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministically derive a 64-bit child seed from ``seed`` and integer tags."""
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(int(seed) & _MASK64))
        for tag in tags:
            h = _absorb(h, np.uint64(int(tag) & _MASK64))
    return int(h)


def uniforms(seed: int, path_ids, n_steps: int, dim: int) -> np.ndarray:
    """Uniforms in (0, 1) of shape ``(len(path_ids), n_steps, dim)``."""
    path_ids = np.asarray(path_ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(int(seed) & _MASK64))
        h = _absorb(h, path_ids)[:, None, None]
        h = _absorb(h, np.arange(n_steps, dtype=np.uint64)[None, :, None])
        h = _absorb(h, np.arange(dim, dtype=np.uint64)[None, None, :])
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normals(seed: int, path_ids, n_steps: int, dim: int) -> np.ndarray:
    """Standard normals keyed by (seed, path, step, component)."""
    return ndtri(uniforms(seed, path_ids, n_steps, dim))


def gaussian_increments(seed: int, path_ids, dt, dim: int) -> np.ndarray:
    """Brownian increments with variance ``dt[k]`` per component, shape (n, K, dim)."""
    dt = np.asarray(dt, dtype=float)
    z = standard_normals(seed, path_ids, dt.size, dim)
    z *= np.sqrt(dt)[None, :, None]
    return z
