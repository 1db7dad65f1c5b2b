"""Gradient (variational) BSDE for ``(grad_x Y h, grad_x Z h)``.

Linearising the quadratic equation along ``h`` gives the affine equation

    G_t = grad Phi(X_T) DX_T + int_t^T (a_s G_s + b_s . H_s + inhom_s) ds - int_t^T H_s dW_s

with ``a = grad_y F``, ``b = grad_z F`` and ``inhom = grad_x F . DX``.  It
is solved by backward regression and, independently, through the
measure-change representation

    e_t G_t = E*[ e_T G_T + int_t^T e_s inhom_s ds | F_t ],   e_t = exp(int_0^t a),

where ``P*`` has density ``exp(int b dW - 1/2 int |b|^2 dt)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bmo_constants import BmoParams, _below_critical, reverse_holder_constant
from .errors import DomainError, ImportanceSamplingError, ShapeError, ValidationError
from .forward import _check_grid_batch, simulate_forward
from .linear import LinearCoeffs, _group_stats, martingale_part, solve_linear_backward
from .quad_bsde import DriverSpec, solve_quadratic_bsde
from .regression import BasisSpec, Projector, conditional_expectation

__all__ = [
    "LinearCoeffs",
    "GradientSolution",
    "ReverseHolderReport",
    "assemble_linear_coeffs",
    "girsanov_weights",
    "solve_gradient_regression",
    "solve_gradient_girsanov",
    "finite_difference_gradient",
    "check_reverse_holder_empirical",
]

ESS_THRESHOLD = 0.01
RH_SLACK = 0.25


@dataclass
class GradientSolution:
    """``G`` is ``(n, K+1)``, ``Hz`` is ``(n, K, m)``; ``weights`` and ``e_factor`` are ``(n, K+1)``."""

    G: np.ndarray
    Hz: np.ndarray
    weights: np.ndarray
    e_factor: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def g0(self) -> float:
        return float(self.meta["g0"][0])


@dataclass
class ReverseHolderReport:
    q: float
    N: float
    bound: float
    per_node_max: np.ndarray
    per_node_mean: np.ndarray
    per_node_se: np.ndarray
    slack: float

    @property
    def max_ratio(self) -> float:
        return float(self.per_node_max.max())

    @property
    def passed(self) -> bool:
        return self.max_ratio <= self.bound * (1.0 + self.slack)


def assemble_linear_coeffs(driver: DriverSpec, batch, sol, var, grid) -> LinearCoeffs:
    """Evaluate the driver's partial derivatives along the solved paths.

    ``K_k = max(1, C (1 + |Z_k|))``; the growth constants of the driver give
    ``a <= C^{1 - 2 alpha} K^{2 alpha}`` and ``|b| <= K``, so the returned
    coefficients carry ``const = max(1, C^{1 - 2 alpha})``.  The sampled
    values are checked against the driver's declared growth and a
    :class:`ValidationError` is raised on violation.
    """
    _check_grid_batch(grid, batch)
    n, K1, d = batch.X.shape
    K = K1 - 1
    if sol.Y.shape != (n, K1) or sol.Z.shape[:2] != (n, K):
        raise ShapeError("solution does not match the batch")
    if var.DX.shape != batch.X.shape:
        raise ShapeError("variational batch does not match the batch")
    m = sol.Z.shape[2]
    C, alpha = driver.C_growth, driver.alpha
    a = np.empty((n, K))
    b = np.empty((n, K, m))
    inhom = np.empty((n, K))
    for k in range(K):
        t = grid.nodes[k]
        x, y, z = batch.X[:, k, :], sol.Y[:, k], sol.Z[:, k, :]
        a[:, k] = driver.grad_y_F(t, x, y, z)
        b[:, k, :] = driver.grad_z_F(t, x, y, z)
        inhom[:, k] = np.einsum("nd,nd->n", np.broadcast_to(driver.grad_x_F(t, x, y, z), (n, d)), var.DX[:, k, :])
    terminal = np.einsum("nd,nd->n", np.broadcast_to(driver.grad_Phi(batch.X[:, K, :]), (n, d)), var.DX[:, K, :])

    growth = 1.0 + np.linalg.norm(sol.Z, axis=2)
    tol = 1.0 + 1e-9
    if np.any(np.linalg.norm(b, axis=2) > tol * C * growth + 1e-12):
        raise ValidationError(f"driver {driver.name}: |grad_z F| exceeds C(1+|z|) on the solved paths")
    if np.any(np.abs(a) > tol * C * growth ** (2.0 * alpha) + 1e-12):
        raise ValidationError(f"driver {driver.name}: |grad_y F| exceeds C(1+|z|)^(2 alpha) on the solved paths")
    Kproc = np.maximum(1.0, C * growth)
    const = max(1.0, C ** (1.0 - 2.0 * alpha)) if C > 0 else 1.0
    return LinearCoeffs(
        a=a, b=b, inhom=inhom, terminal=terminal, K=Kproc, f_mag=np.abs(inhom), alpha=alpha, const=const
    )


def girsanov_weights(lin: LinearCoeffs, batch, grid):
    """Log stochastic exponential and log discount, both ``(n, K+1)`` and zero at node 0."""
    dt = grid.dt
    n, K = lin.a.shape
    inc_w = np.einsum("nkm,nkm->nk", lin.b, batch.dW) - 0.5 * np.sum(lin.b**2, axis=2) * dt
    inc_e = lin.a * dt
    log_w = np.zeros((n, K + 1))
    log_e = np.zeros((n, K + 1))
    np.cumsum(inc_w, axis=1, out=log_w[:, 1:])
    np.cumsum(inc_e, axis=1, out=log_e[:, 1:])
    return log_w, log_e


def solve_gradient_regression(
    lin: LinearCoeffs, batch, grid, basis: BasisSpec, groups: int = 1, validate: bool = True
) -> GradientSolution:
    """Backward regression with the affine driver ``a G + b.H + inhom``."""
    _check_grid_batch(grid, batch)
    if validate:
        lin.validate()
    sol = solve_linear_backward(lin.terminal, lin.a, lin.b, lin.inhom, batch, grid, basis, groups)
    log_w, log_e = girsanov_weights(lin, batch, grid)
    meta = {
        "g0": sol.meta["y0"],
        "g0_se": sol.meta["y0_se"],
        "g0_cv": sol.meta["y0_cv"],
        "g0_cv_se": sol.meta["y0_cv_se"],
        "method": "regression",
        "groups": groups,
    }
    return GradientSolution(G=sol.Y, Hz=sol.Z, weights=np.exp(log_w), e_factor=np.exp(log_e), meta=meta)


def solve_gradient_girsanov(
    lin: LinearCoeffs,
    batch,
    grid,
    basis: Optional[BasisSpec] = None,
    validate: bool = True,
) -> GradientSolution:
    """Importance-sampling evaluation of the measure-change representation.

    The pathwise target at node ``k`` is

        P_k = (W_K / W_k) (e_K / e_k terminal + sum_{j>=k} e_j / e_k inhom_j dt_j)

    whose conditional mean given ``F_k`` is ``G_k``.  ``G_0`` is the plain
    sample mean of ``P_0``; interior nodes are regressed on ``X_k``, and
    ``Hz_k`` is the martingale-increment regression of ``P_{k+1}``.
    Raises :class:`ImportanceSamplingError` when the effective sample size
    of the terminal weights drops below 1% of the paths.
    """
    _check_grid_batch(grid, batch)
    if validate:
        lin.validate()
    basis = basis or BasisSpec()
    n, K = lin.a.shape
    dt = grid.dt
    log_w, log_e = girsanov_weights(lin, batch, grid)
    wT = np.exp(log_w[:, K] - log_w[:, K].max())
    ess = float(wT.sum() ** 2 / np.sum(wT**2))
    if ess < ESS_THRESHOLD * n:
        raise ImportanceSamplingError(
            f"effective sample size {ess:.1f} is below {ESS_THRESHOLD:.0%} of {n} paths"
        )
    # S_k = e_K terminal + sum_{j>=k} e_j inhom_j dt_j  (undiscounted from 0)
    src = np.exp(log_e[:, :K]) * lin.inhom * dt
    S = np.empty((n, K + 1))
    S[:, K] = np.exp(log_e[:, K]) * lin.terminal
    S[:, :K] = S[:, K:K + 1] + np.cumsum(src[:, ::-1], axis=1)[:, ::-1]
    P = np.exp(log_w[:, K:K + 1] - log_w - log_e) * S
    G = np.empty((n, K + 1))
    G[:, K] = lin.terminal
    Hz = np.empty_like(batch.dW)
    for k in range(K - 1, -1, -1):
        proj = Projector(batch.X[:, k, :], basis)
        G[:, k] = proj(P[:, k])
        Hz[:, k, :] = martingale_part(P[:, k + 1], batch.dW[:, k, :], dt[k], proj)
    g0, g0_se = _group_stats(P[:, 0], 1)
    w = np.exp(log_w)
    meta = {
        "g0": g0,
        "g0_se": g0_se,
        "ess": ess,
        "weight_mean": w.mean(axis=0),
        "weight_se": w.std(axis=0, ddof=1) / math.sqrt(n),
        "method": "girsanov",
    }
    return GradientSolution(G=G, Hz=Hz, weights=w, e_factor=np.exp(log_e), meta=meta)


def finite_difference_gradient(
    driver: DriverSpec,
    model,
    grid,
    x0,
    h,
    eps: float,
    seed: int,
    basis: BasisSpec,
    n_paths: int = 100_000,
) -> float:
    """Central difference of the quadratic solver's ``Y_0`` with common random numbers."""
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    vals = []
    for sign in (1.0, -1.0):
        batch = simulate_forward(model, grid, n_paths, x0 + sign * eps * h, seed)
        vals.append(float(solve_quadratic_bsde(driver, batch, grid, basis).y0[0]))
    return (vals[0] - vals[1]) / (2.0 * eps)


def check_reverse_holder_empirical(
    weights,
    q: float,
    params: BmoParams,
    features: Optional[np.ndarray] = None,
    basis: Optional[BasisSpec] = None,
    slack: float = RH_SLACK,
) -> ReverseHolderReport:
    """Estimate ``E[W_T^q | F_k] / W_k^q`` at every node and compare with ``K(q, N)``.

    ``weights`` is ``(n, K+1)`` (or a :class:`GradientSolution`).  With
    ``features`` of shape ``(n, K+1, d)`` the conditional expectation is
    regressed on ``features[:, k]``; without, the ratio's plain mean is used
    (exact when the ratio is deterministic, e.g. constant ``b``).
    """
    if isinstance(weights, GradientSolution):
        weights = weights.weights
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2:
        raise ShapeError("weights must be (n_paths, K+1)")
    if not (q > 1.0 and _below_critical(q, params.q_star)):
        raise DomainError(f"q={q} must lie in (1, q*={float(params.q_star)!r})")
    bound = reverse_holder_constant(q, params)
    basis = basis or BasisSpec()
    n, K1 = weights.shape
    logw = np.log(weights)
    ratio = np.exp(q * (logw[:, -1:] - logw))
    per_max = np.empty(K1)
    mean = ratio.mean(axis=0)
    se = ratio.std(axis=0, ddof=1) / math.sqrt(n)
    for k in range(K1):
        if features is None:
            per_max[k] = mean[k]
        else:
            fit = conditional_expectation(features[:, k, :], ratio[:, k], basis)
            per_max[k] = float(fit.max())
    return ReverseHolderReport(
        q=float(q), N=float(params.N), bound=bound, per_node_max=per_max,
        per_node_mean=mean, per_node_se=se, slack=slack,
    )
