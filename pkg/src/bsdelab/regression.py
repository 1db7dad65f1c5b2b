"""Least-squares conditional expectations on polynomial bases.

Features are standardised per regression group (empirical mean and standard
deviation), then expanded in normalised probabilists' Hermite polynomials
``He_n(z) / sqrt(n!)`` of total degree ``<= degree``.  A feature with zero
spread in a group (e.g. the deterministic initial state) contributes only
the constant, so the fit collapses to the group mean.

Paths may be split into ``groups`` contiguous, equally sized blocks that are
regressed independently; nested Monte Carlo uses this to solve thousands of
small problems in one vectorised pass.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import BasisError, ShapeError

__all__ = ["BasisSpec", "Projector", "multi_indices", "design_matrix", "conditional_expectation"]

_DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True)
class BasisSpec:
    family: str = "hermite"
    degree: int = 3
    ridge: float = 1e-10
    max_condition: float = 1e12

    def __post_init__(self):
        if self.family != "hermite":
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 0:
            raise ValueError("basis degree must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")

    @property
    def basis_id(self) -> str:
        return f"{self.family}-deg{self.degree}-ridge{self.ridge:g}"


def multi_indices(dim: int, degree: int) -> list:
    """All multi-indices of total degree ``<= degree``, constant first."""
    out = [
        a for a in itertools.product(range(degree + 1), repeat=dim) if sum(a) <= degree
    ]
    out.sort(key=lambda a: (sum(a), tuple(-x for x in a)))
    return out


def _hermite_table(z: np.ndarray, degree: int) -> np.ndarray:
    """Normalised ``He_0..He_degree`` at ``z``; new leading axis."""
    H = np.empty((degree + 1,) + z.shape)
    H[0] = 1.0
    if degree >= 1:
        H[1] = z
    for n in range(1, degree):
        np.multiply(z, H[n], out=H[n + 1])
        H[n + 1] -= n * H[n - 1]
    for n in range(2, degree + 1):
        H[n] *= 1.0 / math.sqrt(math.factorial(n))
    return H


def _standardise(F: np.ndarray):
    """Per-group standardisation of ``F`` with shape ``(G, n, q)``."""
    mu = F.mean(axis=1, keepdims=True)
    sd = F.std(axis=1, keepdims=True)
    degenerate = sd <= _DEGENERATE_RTOL * (1.0 + np.abs(mu))
    safe = np.where(degenerate, 1.0, sd)
    Z = (F - mu) / safe
    Z[np.broadcast_to(degenerate, Z.shape)] = 0.0
    return Z, degenerate[:, 0, :]


def design_matrix(features: np.ndarray, basis: BasisSpec, groups: int = 1):
    """Return ``(Phi, active)``: design ``(G, n_g, p)`` and column mask ``(G, p)``."""
    F = _as_groups(np.asarray(features, dtype=float), groups)
    G, n_g, q = F.shape
    Z, degenerate = _standardise(F)
    idx = multi_indices(q, basis.degree)
    H = _hermite_table(np.moveaxis(Z, 2, 0).copy(), basis.degree)  # (degree+1, q, G, n)
    Phi = np.empty((G, n_g, len(idx)))
    active = np.ones((G, len(idx)), dtype=bool)
    for c, a in enumerate(idx):
        used = [(j, aj) for j, aj in enumerate(a) if aj]
        if not used:
            Phi[:, :, c] = 1.0
            continue
        j0, a0 = used[0]
        col = Phi[:, :, c]
        col[...] = H[a0, j0]
        active[:, c] &= ~degenerate[:, j0]
        for j, aj in used[1:]:
            col *= H[aj, j]
            active[:, c] &= ~degenerate[:, j]
    # degenerate features were standardised to 0, so only He_0..: zero the rest
    if not active.all():
        Phi *= active[:, None, :]
    return Phi, active


def _as_groups(a: np.ndarray, groups: int) -> np.ndarray:
    if a.ndim == 1:
        a = a[:, None]
    n = a.shape[0]
    if groups < 1 or n % groups:
        raise ShapeError(f"{n} rows cannot be split into {groups} equal groups")
    return a.reshape(groups, n // groups, *a.shape[1:])


class Projector:
    """Least-squares projection onto the basis of fixed features.

    Building the design matrix and factorising the normal equations once
    lets several targets (continuation value, martingale increments) share
    the work.  Raises :class:`BasisError` when the active normal matrix of
    any group has a condition number above ``basis.max_condition``.
    """

    def __init__(self, features: np.ndarray, basis: BasisSpec, groups: int = 1):
        features = np.asarray(features, dtype=float)
        self.n = features.shape[0]
        self.groups = groups
        self.basis = basis
        Phi, active = design_matrix(features, basis, groups)
        G, n_g, p = Phi.shape
        M = np.matmul(Phi.transpose(0, 2, 1), Phi) / n_g
        M += basis.ridge * np.eye(p)
        inactive = ~active
        if inactive.any():
            # inactive columns are identically zero; pin their coefficients to 0
            M += inactive[:, :, None] * np.eye(p)[None]
        cond = np.linalg.cond(M)
        worst = float(np.max(cond))
        if not np.isfinite(worst) or worst > basis.max_condition:
            raise BasisError(
                f"regression normal equations ill-conditioned: condition number {worst:.3e} "
                f"exceeds {basis.max_condition:.1e} (basis {basis.basis_id})",
                condition_number=worst,
            )
        self.Phi = Phi
        self.M = M
        self.condition_number = worst
        self.n_basis = p

    def coefficients(self, targets: np.ndarray) -> np.ndarray:
        Y = _as_groups(np.asarray(targets, dtype=float), self.groups)
        rhs = np.matmul(self.Phi.transpose(0, 2, 1), Y) / self.Phi.shape[1]
        return np.linalg.solve(self.M, rhs)

    def __call__(self, targets: np.ndarray) -> np.ndarray:
        targets = np.asarray(targets, dtype=float)
        if targets.shape[0] != self.n:
            raise ShapeError("features and targets must have the same number of rows")
        coef = self.coefficients(targets)
        fitted = np.matmul(self.Phi, coef).reshape(self.n, -1)
        return fitted[:, 0] if targets.ndim == 1 else fitted.reshape(targets.shape)


def conditional_expectation(
    features: np.ndarray,
    targets: np.ndarray,
    basis: BasisSpec,
    groups: int = 1,
    return_info: bool = False,
):
    """Fitted values of ``E[targets | features]`` by ridge least squares.

    ``features`` is ``(n, q)`` (or ``(n,)``), ``targets`` is ``(n,)`` or
    ``(n, r)``; the result has the shape of ``targets``.  Raises
    :class:`BasisError` on ill-conditioned normal equations.
    """
    targets = np.asarray(targets, dtype=float)
    features = np.asarray(features, dtype=float)
    if features.shape[0] != targets.shape[0]:
        raise ShapeError("features and targets must have the same number of rows")
    proj = Projector(features, basis, groups)
    fitted = proj(targets)
    if return_info:
        return fitted, {
            "condition_number": proj.condition_number,
            "n_basis": proj.n_basis,
            "coef": proj.coefficients(targets),
        }
    return fitted
