"""Finite-dimensional forward SDE in mild form and its variational process.

The state space is truncated to ``d`` coordinates and the noise to ``m``
independent Brownian motions.  Paths follow the exponential-Euler scheme

    X_{k+1} = e^{dt_k A} (X_k + b(t_k, X_k) dt_k + sigma(t_k, X_k) dW_k)

and the derivative in the initial condition along ``h`` is the same scheme
linearised around the base path, driven by the same increments.

Coefficient callables are vectorised over paths:

* ``b(t, x)`` with ``x`` of shape ``(n, d)`` returns ``(n, d)``
* ``sigma(t, x)`` returns ``(n, d, m)``
* ``grad_b(t, x)`` returns ``(n, d, d)`` with ``[.., i, l] = d b_i / d x_l``
* ``grad_sigma(t, x)`` returns ``(n, d, m, d)`` with the derivative index last
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

from . import rng
from .errors import ShapeError, SimulationError, ValidationError

__all__ = [
    "StateModel",
    "TimeGrid",
    "PathBatch",
    "VariationalBatch",
    "simulate_forward",
    "simulate_variational",
    "moment_report",
    "validate_model",
    "write_paths_csv",
    "write_paths_binary",
    "read_paths_binary",
]


@dataclass
class StateModel:
    dim_state: int
    dim_noise: int
    A: np.ndarray
    b: Callable
    sigma: Callable
    grad_b: Callable
    grad_sigma: Callable
    lipschitz_L: float
    name: str = "custom"

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ShapeError("state and noise dimensions must be positive")
        if self.A.shape != (self.dim_state, self.dim_state):
            raise ShapeError(f"A must be {self.dim_state}x{self.dim_state}, got {self.A.shape}")

    def drift_diffusion(self, t, x):
        return self.b(t, x), self.sigma(t, x)


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ShapeError("a time grid needs at least two nodes")
        if not np.all(np.diff(nodes) > 0.0):
            raise ShapeError("time grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t0: float, T: float, K: int) -> "TimeGrid":
        if K < 1:
            raise ShapeError(f"need K >= 1 steps, got {K}")
        if not T > t0:
            raise ShapeError(f"need T > t0, got t0={t0}, T={T}")
        nodes = t0 + (T - t0) * np.arange(K + 1) / K
        nodes[-1] = T
        return cls(nodes)

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def K(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        k = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[k] - t) > atol * max(1.0, abs(t)):
            raise ShapeError(f"time {t} is not a grid node")
        return k


@dataclass
class PathBatch:
    """Simulated paths.  ``x0`` is ``(d,)`` or per-path ``(n, d)``."""

    x0: np.ndarray
    n_paths: int
    X: np.ndarray
    dW: np.ndarray
    seed: int
    path_ids: np.ndarray = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.dW.shape[1]


@dataclass
class VariationalBatch:
    h: np.ndarray
    DX: np.ndarray


def _check_grid_batch(grid: TimeGrid, batch: PathBatch, model: Optional[StateModel] = None):
    if batch.X.shape[1] != grid.K + 1 or batch.dW.shape[1] != grid.K:
        raise ShapeError(
            f"batch has {batch.dW.shape[1]} steps but grid has {grid.K}"
        )
    if model is not None and (
        batch.X.shape[2] != model.dim_state or batch.dW.shape[2] != model.dim_noise
    ):
        raise ShapeError("batch dimensions do not match the state model")


class _SemigroupCache:
    """``e^{dt A}`` computed once per distinct step size."""

    def __init__(self, A: np.ndarray):
        self.A = A
        self.zero = not np.any(A)
        self._cache = {}

    def __call__(self, dt: float) -> Optional[np.ndarray]:
        if self.zero:
            return None
        E = self._cache.get(dt)
        if E is None:
            E = expm(dt * self.A)
            self._cache[dt] = E
        return E


def _apply(E, v):
    return v if E is None else v @ E.T


def simulate_forward(
    model: StateModel,
    grid: TimeGrid,
    n_paths: int,
    x0,
    seed: int,
    path_ids=None,
) -> PathBatch:
    """Simulate ``n_paths`` exponential-Euler paths from ``x0`` at ``grid.t0``.

    ``path_ids`` selects which counter-based streams to use (default
    ``0..n_paths-1``); a path's increments depend only on ``(seed, id)``.
    """
    if n_paths < 1:
        raise ShapeError(f"n_paths must be >= 1, got {n_paths}")
    d, m = model.dim_state, model.dim_noise
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = x0.reshape(1)
    if x0.shape not in ((d,), (n_paths, d)):
        raise ShapeError(f"x0 must have shape ({d},) or ({n_paths}, {d}), got {x0.shape}")
    if path_ids is None:
        path_ids = np.arange(n_paths, dtype=np.uint64)
    path_ids = np.asarray(path_ids, dtype=np.uint64)
    if path_ids.shape != (n_paths,):
        raise ShapeError("path_ids must have one entry per path")

    dt = grid.dt
    dW = rng.gaussian_increments(seed, path_ids, dt, m)
    X = np.empty((n_paths, grid.K + 1, d))
    X[:, 0, :] = x0
    semigroup = _SemigroupCache(model.A)
    x = X[:, 0, :].copy()
    for k in range(grid.K):
        t = grid.nodes[k]
        drift = model.b(t, x)
        diff = model.sigma(t, x)
        x = x + drift * dt[k] + np.einsum("nij,nj->ni", diff, dW[:, k, :])
        x = _apply(semigroup(float(dt[k])), x)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {k + 1}", step=k + 1)
        X[:, k + 1, :] = x
    return PathBatch(x0=x0, n_paths=n_paths, X=X, dW=dW, seed=int(seed), path_ids=path_ids)


def simulate_variational(
    model: StateModel, grid: TimeGrid, batch: PathBatch, h
) -> VariationalBatch:
    """Derivative of the paths in the initial condition along ``h``.

    The linearised scheme reuses ``batch.dW``, so it is the exact derivative
    of the discrete map that produced ``batch``.
    """
    _check_grid_batch(grid, batch, model)
    d = model.dim_state
    h = np.asarray(h, dtype=float)
    if h.ndim == 0:
        h = h.reshape(1)
    if h.shape not in ((d,), (batch.n_paths, d)):
        raise ShapeError(f"h must have shape ({d},) or ({batch.n_paths}, {d})")
    dt = grid.dt
    DX = np.empty_like(batch.X)
    DX[:, 0, :] = h
    semigroup = _SemigroupCache(model.A)
    v = DX[:, 0, :].copy()
    for k in range(grid.K):
        t = grid.nodes[k]
        x = batch.X[:, k, :]
        jb = model.grad_b(t, x)
        js = model.grad_sigma(t, x)
        dsig = np.einsum("nijl,nl->nij", js, v)
        v = v + np.einsum("nil,nl->ni", jb, v) * dt[k] + np.einsum(
            "nij,nj->ni", dsig, batch.dW[:, k, :]
        )
        v = _apply(semigroup(float(dt[k])), v)
        DX[:, k + 1, :] = v
    return VariationalBatch(h=h, DX=DX)


def moment_report(batch: PathBatch, p: float) -> float:
    """Empirical ``E[sup_k |X_k|^p]^{1/p}``."""
    if not p >= 1.0:
        raise ValueError(f"p must be >= 1, got {p}")
    norms = np.linalg.norm(batch.X, axis=2)
    if not np.all(np.isfinite(norms)):
        raise SimulationError("non-finite data in batch")
    sup = norms.max(axis=1)
    scale = sup.max()
    if scale == 0.0:
        return 0.0
    return float(scale * np.mean((sup / scale) ** p) ** (1.0 / p))


def _fd_jacobian(fun, t, x, eps):
    """Central differences of ``fun(t, x)`` in ``x``; derivative axis appended last."""
    d = x.shape[1]
    cols = []
    for l in range(d):
        e = np.zeros(d)
        e[l] = eps
        cols.append((fun(t, x + e) - fun(t, x - e)) / (2.0 * eps))
    return np.stack(cols, axis=-1)


def validate_model(model: StateModel, n_probe: int = 64, seed: int = 0, rtol: float = 1e-4):
    """Sampled checks of the Lipschitz/growth declarations and the Jacobians.

    Raises :class:`ValidationError` on the first violated predicate.
    """
    gen = np.random.default_rng(seed)
    d = model.dim_state
    t = gen.uniform(0.0, 1.0)
    x = gen.normal(scale=2.0, size=(n_probe, d))
    y = x + gen.normal(scale=0.5, size=(n_probe, d))
    L = model.lipschitz_L * (1.0 + 1e-9)
    bx, by = model.b(t, x), model.b(t, y)
    dxy = np.linalg.norm(x - y, axis=1)
    if np.any(np.linalg.norm(bx - by, axis=1) > L * dxy):
        raise ValidationError(f"{model.name}: drift violates the declared Lipschitz constant")
    if np.any(np.linalg.norm(bx, axis=1) > L * (1.0 + np.linalg.norm(x, axis=1))):
        raise ValidationError(f"{model.name}: drift violates the linear growth bound")
    sx, sy = model.sigma(t, x), model.sigma(t, y)
    if sx.shape != (n_probe, d, model.dim_noise):
        raise ShapeError(f"{model.name}: sigma returns shape {sx.shape}")
    hs = lambda s: np.sqrt(np.sum(s * s, axis=(1, 2)))
    if np.any(hs(sx - sy) > L * dxy):
        raise ValidationError(f"{model.name}: diffusion violates the declared Lipschitz constant")
    if np.any(hs(sx) > L * (1.0 + np.linalg.norm(x, axis=1))):
        raise ValidationError(f"{model.name}: diffusion violates the linear growth bound")
    eps = 1e-5
    for label, fun, jac in (
        ("grad_b", model.b, model.grad_b),
        ("grad_sigma", model.sigma, model.grad_sigma),
    ):
        fd = _fd_jacobian(fun, t, x, eps)
        an = jac(t, x)
        if an.shape != fd.shape:
            raise ShapeError(f"{model.name}: {label} has shape {an.shape}, expected {fd.shape}")
        if np.any(np.abs(an - fd) > rtol * np.maximum(1.0, np.abs(fd))):
            raise ValidationError(f"{model.name}: {label} disagrees with finite differences")


def write_paths_csv(path, batch: PathBatch, grid: TimeGrid) -> None:
    """Columnar CSV: ``path, step, time, x_0 .. x_{d-1}``."""
    from .io import write_csv

    n, K1, d = batch.X.shape
    ids = np.repeat(np.arange(n), K1)
    steps = np.tile(np.arange(K1), n)
    times = np.tile(grid.nodes, n)
    cols = {"path": ids, "step": steps, "time": times}
    flat = batch.X.reshape(n * K1, d)
    for i in range(d):
        cols[f"x_{i}"] = flat[:, i]
    write_csv(path, cols)


_MAGIC = b"BSDX"
_HEADER = struct.Struct("<4sIIIIQ")


def write_paths_binary(path, batch: PathBatch) -> None:
    """Little-endian dump.

    Header: magic ``BSDX``, u32 version (1), u32 n_paths, u32 n_nodes,
    u32 dim_state, u64 seed.  Body: ``X`` as row-major float64 of shape
    ``(n_paths, n_nodes, dim_state)``.
    """
    n, K1, d = batch.X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, n, K1, d, int(batch.seed) & (2**64 - 1)))
        fh.write(np.ascontiguousarray(batch.X, dtype="<f8").tobytes())


def read_paths_binary(path):
    """Inverse of :func:`write_paths_binary`; returns ``(X, seed)``."""
    with open(path, "rb") as fh:
        magic, version, n, K1, d, seed = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC or version != 1:
            raise ValueError(f"{path}: not a version-1 path dump")
        X = np.frombuffer(fh.read(), dtype="<f8").reshape(n, K1, d).copy()
    return X, seed
