"""Linear BSDEs with stochastic Lipschitz coefficients.

The generator is affine, ``inhom_k + a_k y + b_k . z``, with path-dependent
coefficients dominated by a process ``K >= 1``:

    a_k <= const * K_k^{2 alpha},   |b_k| <= const * K_k,   |inhom_k| <= f_mag_k.

:func:`solve_linear_backward` is the shared backward-regression core;
:func:`solve_linear_bsde_truncated` adds the level-``n`` truncation of the
data and of the coefficients after the first time the running integral of
``f_mag + K^2`` reaches ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, StepSizeError, ValidationError
from .regression import BasisSpec, Projector

__all__ = [
    "LinearCoeffs",
    "BsdeSolution",
    "martingale_part",
    "solve_linear_backward",
    "running_energy",
    "solve_linear_bsde_truncated",
]


@dataclass
class BsdeSolution:
    """Discrete ``(Y, Z)`` on every path: ``Y`` is ``(n, K+1)``, ``Z`` is ``(n, K, m)``."""

    Y: np.ndarray
    Z: np.ndarray
    basis_id: str
    picard_iters: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def y0(self) -> np.ndarray:
        """Per-group mean of ``Y`` at the first node."""
        return self.meta["y0"]


@dataclass
class LinearCoeffs:
    a: np.ndarray
    b: np.ndarray
    inhom: np.ndarray
    terminal: np.ndarray
    K: np.ndarray
    f_mag: np.ndarray
    alpha: float = 0.5
    const: float = 1.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.inhom = np.asarray(self.inhom, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        self.f_mag = np.asarray(self.f_mag, dtype=float)
        n, K = self.a.shape
        if self.b.ndim == 2:
            self.b = self.b[:, :, None]
        for name, arr, shape in (
            ("b", self.b, (n, K, self.b.shape[-1])),
            ("inhom", self.inhom, (n, K)),
            ("terminal", self.terminal, (n,)),
            ("K", self.K, (n, K)),
            ("f_mag", self.f_mag, (n, K)),
        ):
            if arr.shape != shape:
                raise ShapeError(f"LinearCoeffs.{name} has shape {arr.shape}, expected {shape}")

    def validate(self, rtol: float = 1e-9) -> None:
        """Samplewise domination checks; raises :class:`ValidationError`."""
        if np.any(self.K < 1.0):
            raise ValidationError("dominating process K must be bounded below by 1")
        slack = 1.0 + rtol
        if np.any(self.a > slack * self.const * self.K ** (2.0 * self.alpha)):
            raise ValidationError("coefficient a exceeds const * K^(2 alpha)")
        if np.any(np.linalg.norm(self.b, axis=2) > slack * self.const * self.K):
            raise ValidationError("coefficient |b| exceeds const * K")
        if np.any(self.f_mag < 0.0) or np.any(np.abs(self.inhom) > slack * self.f_mag + 1e-300):
            raise ValidationError("inhomogeneity is not dominated by the nonnegative f_mag")


def martingale_part(Y_next, dW_k, dt_k, proj: Projector, centre=None):
    """``E[(Y_next - E[Y_next|F_k]) dW_k | F_k] / dt_k``, shape ``(n, m)``.

    ``proj`` projects onto the basis of the time-``k`` features.
    Subtracting the conditional mean leaves the conditional expectation
    unchanged and removes the ``Var(Y)/dt`` noise from the target.
    """
    if centre is None:
        centre = proj(Y_next)
    target = (Y_next - centre)[:, None] * dW_k
    return proj(target).reshape(dW_k.shape) / dt_k


def _group_stats(values: np.ndarray, groups: int):
    v = values.reshape(groups, -1)
    n_g = v.shape[1]
    se = v.std(axis=1, ddof=1) / np.sqrt(n_g) if n_g > 1 else np.zeros(groups)
    return v.mean(axis=1), se


def solve_linear_backward(
    terminal,
    a,
    b,
    inhom,
    batch,
    grid,
    basis: BasisSpec,
    groups: int = 1,
    features: Optional[np.ndarray] = None,
    active: Optional[np.ndarray] = None,
) -> BsdeSolution:
    """Backward regression for ``Y_k = E[Y_{k+1}|F_k] + dt (inhom + a Y_k + b.Z_k)``.

    Implicit in ``y`` (a single division, the generator being affine),
    explicit in ``z``.  ``features`` overrides the regression state
    (default ``batch.X``) and must have shape ``(n, K+1, q)``; ``active`` is
    an optional ``(n, K)`` mask switching the generator off.
    """
    n, K1, _ = batch.X.shape
    K = K1 - 1
    m = batch.dW.shape[2]
    dt = grid.dt
    feats = batch.X if features is None else features
    if feats.shape[:2] != (n, K1):
        raise ShapeError("regression features must be (n_paths, K+1, q)")
    act = np.ones((n, K)) if active is None else np.asarray(active, dtype=float)
    Y = np.empty((n, K1))
    Z = np.empty((n, K, m))
    Y[:, K] = terminal
    drift_path = np.zeros(n)
    mart_path = np.zeros(n)
    conds = []
    for k in range(K - 1, -1, -1):
        fk = feats[:, k, :]
        proj = Projector(fk, basis, groups)
        conds.append(proj.condition_number)
        cy = proj(Y[:, k + 1])
        Z[:, k, :] = martingale_part(Y[:, k + 1], batch.dW[:, k, :], dt[k], proj, cy)
        h = dt[k] * act[:, k]
        denom = 1.0 - h * a[:, k]
        if np.any(denom <= 0.0):
            raise StepSizeError(f"step {k}: dt * a >= 1, the implicit linear step is singular")
        Y[:, k] = (cy + h * (inhom[:, k] + np.einsum("nj,nj->n", b[:, k, :], Z[:, k, :]))) / denom
        drift_path += h * (inhom[:, k] + a[:, k] * Y[:, k] + np.einsum("nj,nj->n", b[:, k, :], Z[:, k, :]))
        mart_path += np.einsum("nj,nj->n", Z[:, k, :], batch.dW[:, k, :])
    y0, _ = _group_stats(Y[:, 0], groups)
    _, y0_se = _group_stats(np.asarray(terminal) + drift_path, groups)
    y0_cv, y0_cv_se = _group_stats(np.asarray(terminal) + drift_path - mart_path, groups)
    meta = {"y0": y0, "y0_se": y0_se, "y0_cv": y0_cv, "y0_cv_se": y0_cv_se, "groups": groups, "max_condition": max(conds)}
    return BsdeSolution(Y, Z, basis.basis_id, np.ones(K, dtype=int), meta)


def running_energy(lin: LinearCoeffs, grid) -> np.ndarray:
    """``A_k = sum_{j<k} (f_mag_j + K_j^2) dt_j`` for ``k = 0..K``, shape ``(n, K+1)``."""
    inc = (lin.f_mag + lin.K**2) * grid.dt[None, :]
    A = np.zeros((inc.shape[0], inc.shape[1] + 1))
    np.cumsum(inc, axis=1, out=A[:, 1:])
    return A


def solve_linear_bsde_truncated(
    xi,
    lin: LinearCoeffs,
    batch,
    grid,
    basis: BasisSpec,
    n_trunc: int,
    ladder: Optional[Sequence[int]] = None,
    validate: bool = True,
) -> BsdeSolution:
    """Solve the level-``n`` truncated problems along a ladder of levels.

    For level ``n`` the terminal value is ``xi 1{|xi| <= n}`` and the
    generator is switched off from the first node where the running integral
    of ``f_mag + K^2`` reaches ``n``.  The regression state is ``X_k``
    augmented with that running integral, which makes the switch-off
    adapted to the regression filtration.

    Returns the level-``n_trunc`` solution; ``meta["cauchy"]`` lists, for
    consecutive levels ``n -> n'``, the mean and max over paths of
    ``sup_k |Y^{(n')}_k - Y^{(n)}_k|``.
    """
    if validate:
        lin.validate()
    xi = np.asarray(xi, dtype=float)
    if ladder is None:
        ladder = []
        lvl = 1
        while lvl < n_trunc:
            ladder.append(lvl)
            lvl *= 2
        ladder.append(n_trunc)
    ladder = sorted(set(int(v) for v in ladder) | {int(n_trunc)})
    if ladder[0] < 1:
        raise ValueError("truncation levels must be >= 1")
    energy = running_energy(lin, grid)
    feats = np.concatenate([batch.X, energy[:, :, None]], axis=2)
    sols = {}
    for lvl in ladder:
        xi_n = np.where(np.abs(xi) <= lvl, xi, 0.0)
        active = energy[:, :-1] < lvl
        sols[lvl] = solve_linear_backward(
            xi_n, lin.a, lin.b, lin.inhom, batch, grid, basis, features=feats, active=active
        )
        sols[lvl].meta["active_fraction"] = float(active.mean())
    cauchy = []
    for lo, hi in zip(ladder[:-1], ladder[1:]):
        sup = np.max(np.abs(sols[hi].Y - sols[lo].Y), axis=1)
        cauchy.append({"from": lo, "to": hi, "mean_sup": float(sup.mean()), "max_sup": float(sup.max())})
    out = sols[int(n_trunc)]
    out.meta["cauchy"] = cauchy
    out.meta["ladder"] = ladder
    out.meta["levels"] = {lvl: sols[lvl] for lvl in ladder}
    return out
