"""Named forward models, drivers and linear test problems."""

from __future__ import annotations

import math

import numpy as np

from .forward import StateModel
from .linear import LinearCoeffs
from .quad_bsde import DriverSpec

__all__ = [
    "MODELS",
    "DRIVERS",
    "make_model",
    "make_driver",
    "catalog_listing",
    "stochastic_k_problem",
]


def _const_sigma(S):
    S = np.asarray(S, dtype=float)
    d, m = S.shape

    def sigma(t, x):
        return np.broadcast_to(S, (x.shape[0], d, m)).copy()

    def grad_sigma(t, x):
        return np.zeros((x.shape[0], d, m, d))

    return sigma, grad_sigma


def _linear_drift(B):
    B = np.asarray(B, dtype=float)
    d = B.shape[0]

    def b(t, x):
        return x @ B.T

    def grad_b(t, x):
        return np.broadcast_to(B, (x.shape[0], d, d)).copy()

    return b, grad_b


def brownian(dim: int = 1) -> StateModel:
    b, gb = _linear_drift(np.zeros((dim, dim)))
    s, gs = _const_sigma(np.eye(dim))
    return StateModel(dim, dim, np.zeros((dim, dim)), b, s, gb, gs, lipschitz_L=math.sqrt(dim), name=f"brownian-{dim}d")


def ornstein_uhlenbeck(a: float = 1.0, s: float = 0.5) -> StateModel:
    b, gb = _linear_drift(np.zeros((1, 1)))
    sig, gs = _const_sigma([[s]])
    return StateModel(1, 1, [[-a]], b, sig, gb, gs, lipschitz_L=max(abs(s), 1e-12), name="ou-1d")


def linear_multi(dim: int = 2) -> StateModel:
    A = -0.5 * np.eye(dim) + 0.2 * np.eye(dim, k=1)
    B = 0.1 * (np.eye(dim, k=1) - np.eye(dim, k=-1))
    b, gb = _linear_drift(B)
    sig, gs = _const_sigma(0.4 * np.eye(dim))
    L = max(np.linalg.norm(B, 2), 0.4 * math.sqrt(dim))
    return StateModel(dim, dim, A, b, sig, gb, gs, lipschitz_L=L, name=f"linear-multi-{dim}d")


def bounded_nonlinear() -> StateModel:
    def b(t, x):
        return 0.5 * np.sin(x)

    def grad_b(t, x):
        return (0.5 * np.cos(x))[:, :, None]

    def sigma(t, x):
        return (0.8 + 0.2 * np.cos(x))[:, :, None]

    def grad_sigma(t, x):
        return (-0.2 * np.sin(x))[:, :, None, None]

    return StateModel(1, 1, [[0.0]], b, sigma, grad_b, grad_sigma, lipschitz_L=1.0, name="bounded-nonlinear-1d")


def deterministic(a: float = 0.5) -> StateModel:
    def b(t, x):
        return 0.3 * np.cos(x)

    def grad_b(t, x):
        return (-0.3 * np.sin(x))[:, :, None]

    sig, gs = _const_sigma([[0.0]])
    return StateModel(1, 1, [[-a]], b, sig, grad_b, gs, lipschitz_L=0.3, name="deterministic-1d")


MODELS = {
    "brownian-1d": lambda: brownian(1),
    "ou-1d": ornstein_uhlenbeck,
    "linear-multi-d": linear_multi,
    "bounded-nonlinear-1d": bounded_nonlinear,
    "deterministic-1d": deterministic,
}


def _projection(d):
    """Terminal functions act on ``s = sum(x) / sqrt(d)``."""
    w = 1.0 / math.sqrt(d)
    return (lambda x: w * np.sum(x, axis=1)), w


def zero_driver(d: int, m: int) -> DriverSpec:
    proj, w = _projection(d)
    return DriverSpec(
        F=lambda t, x, y, z: np.zeros_like(y),
        Phi=lambda x: np.tanh(proj(x)),
        phi_sup=1.0,
        C_growth=1.0,
        alpha=0.5,
        grad_x_F=lambda t, x, y, z: np.zeros_like(x),
        grad_y_F=lambda t, x, y, z: np.zeros_like(y),
        grad_z_F=lambda t, x, y, z: np.zeros_like(z),
        grad_Phi=lambda x: (w / np.cosh(proj(x)) ** 2)[:, None] * np.ones((1, x.shape[1])),
        n_poly=0,
        name="zero",
    )


def pure_quadratic(d: int, m: int, gamma: float = 1.0) -> DriverSpec:
    """``F = (gamma/2)|z|^2`` with ``Phi = tanh``."""
    base = zero_driver(d, m)
    return DriverSpec(
        F=lambda t, x, y, z: 0.5 * gamma * np.sum(z * z, axis=1),
        Phi=base.Phi,
        phi_sup=1.0,
        C_growth=max(abs(gamma), 1.0),
        alpha=0.5,
        grad_x_F=lambda t, x, y, z: np.zeros_like(x),
        grad_y_F=lambda t, x, y, z: np.zeros_like(y),
        grad_z_F=lambda t, x, y, z: gamma * z,
        grad_Phi=base.grad_Phi,
        n_poly=0,
        name="pure-quadratic-gamma",
    )


def bounded_smooth(d: int, m: int) -> DriverSpec:
    """``F = 0.2 sin(s) - 0.5 y + 0.25|z|^2`` with ``Phi = sin(s)``."""
    proj, w = _projection(d)
    return DriverSpec(
        F=lambda t, x, y, z: 0.2 * np.sin(proj(x)) - 0.5 * y + 0.25 * np.sum(z * z, axis=1),
        Phi=lambda x: np.sin(proj(x)),
        phi_sup=1.0,
        C_growth=1.0,
        alpha=0.5,
        grad_x_F=lambda t, x, y, z: (0.2 * w * np.cos(proj(x)))[:, None] * np.ones((1, x.shape[1])),
        grad_y_F=lambda t, x, y, z: np.full_like(y, -0.5),
        grad_z_F=lambda t, x, y, z: 0.5 * z,
        grad_Phi=lambda x: (w * np.cos(proj(x)))[:, None] * np.ones((1, x.shape[1])),
        n_poly=0,
        name="bounded-smooth",
    )


DRIVERS = {
    "zero": zero_driver,
    "pure-quadratic-gamma": pure_quadratic,
    "bounded-smooth": bounded_smooth,
}


def make_model(model_id: str, **params) -> StateModel:
    try:
        factory = MODELS[model_id]
    except KeyError:
        raise KeyError(f"unknown model {model_id!r}; known: {sorted(MODELS)}") from None
    return factory(**params)


def make_driver(driver_id: str, model: StateModel, **params) -> DriverSpec:
    try:
        factory = DRIVERS[driver_id]
    except KeyError:
        raise KeyError(f"unknown driver {driver_id!r}; known: {sorted(DRIVERS)}") from None
    return factory(model.dim_state, model.dim_noise, **params)


def catalog_listing() -> dict:
    """Declared constants of every catalog entry, validated on construction."""
    from .forward import validate_model
    from .quad_bsde import validate_driver

    models, drivers = [], []
    for key in MODELS:
        mdl = make_model(key)
        validate_model(mdl)
        models.append({"id": key, "dim_state": mdl.dim_state, "dim_noise": mdl.dim_noise, "L": float(mdl.lipschitz_L)})
    probe = make_model("brownian-1d")
    for key in DRIVERS:
        drv = make_driver(key, probe)
        validate_driver(drv, probe.dim_state, probe.dim_noise)
        drivers.append(
            {"id": key, "C": drv.C_growth, "alpha": drv.alpha, "phi_sup": drv.phi_sup, "n": drv.n_poly}
        )
    return {"models": models, "drivers": drivers}


def stochastic_k_problem(batch, grid, alpha: float = 0.5):
    """Linear test problem with an unbounded dominating process.

    ``K = 1 + |X|``, ``a = 0.25 K^{2 alpha}``, ``b = 0.5 K tanh(X)``,
    ``inhom = f_mag = 1 + X^2`` and terminal ``xi = X_T^2``.  Returns
    ``(xi, LinearCoeffs)``.
    """
    X = batch.X[:, :-1, 0]
    K = 1.0 + np.abs(X)
    f = 1.0 + X**2
    lin = LinearCoeffs(
        a=0.25 * K ** (2.0 * alpha),
        b=(0.5 * K * np.tanh(X))[:, :, None],
        inhom=f,
        terminal=batch.X[:, -1, 0] ** 2,
        K=K,
        f_mag=f,
        alpha=alpha,
        const=1.0,
    )
    return lin.terminal.copy(), lin
