import math

import numpy as np
import pytest

from bsdelab.bmo_constants import BmoParams, IntegrabilitySpec, apriori_y_bound, critical_exponent, interior_exponent
from bsdelab.catalog import MODELS, make_driver, make_model
from bsdelab.errors import DomainError, ImportanceSamplingError, ShapeError, ValidationError
from bsdelab.forward import TimeGrid, simulate_forward, simulate_variational
from bsdelab.gradient_bsde import (
    LinearCoeffs,
    assemble_linear_coeffs,
    check_reverse_holder_empirical,
    finite_difference_gradient,
    girsanov_weights,
    solve_gradient_girsanov,
    solve_gradient_regression,
)
from bsdelab.quad_bsde import DriverSpec, cole_hopf_gradient_oracle, estimate_bmo_norm, gaussian_expectation, solve_quadratic_bsde
from bsdelab.regression import BasisSpec

from .conftest import sech2

CH_GRADIENT = 0.5622511325266472
GRID = TimeGrid.uniform(0.0, 1.0, 50)


@pytest.fixture(scope="module")
def quad_setup():
    mdl = make_model("brownian-1d")
    drv = make_driver("pure-quadratic-gamma", mdl)
    batch = simulate_forward(mdl, GRID, 100_000, [0.0], 3)
    sol = solve_quadratic_bsde(drv, batch, GRID, BasisSpec())
    var = simulate_variational(mdl, GRID, batch, [1.0])
    lin = assemble_linear_coeffs(drv, batch, sol, var, GRID)
    return mdl, drv, batch, sol, var, lin


def zero_lin(n, K, terminal):
    z = np.zeros((n, K))
    return LinearCoeffs(a=z, b=z[:, :, None], inhom=z, terminal=terminal, K=np.ones((n, K)), f_mag=z)


# ------------------------------------------------------------ assembly


def test_assembly_zero_driver():
    mdl = make_model("brownian-1d")
    drv = make_driver("zero", mdl)
    b = simulate_forward(mdl, GRID, 2000, [0.0], 0)
    sol = solve_quadratic_bsde(drv, b, GRID, BasisSpec())
    var = simulate_variational(mdl, GRID, b, [1.0])
    lin = assemble_linear_coeffs(drv, b, sol, var, GRID)
    assert not lin.a.any() and not lin.b.any() and not lin.inhom.any()
    np.testing.assert_array_equal(lin.terminal, sech2(b.X[:, -1, 0]))


def test_assembly_quadratic_driver_is_the_intro_linear_equation(quad_setup):
    *_, sol, var, lin = quad_setup
    assert not lin.a.any() and not lin.inhom.any()
    np.testing.assert_array_equal(lin.b, sol.Z)
    np.testing.assert_array_equal(lin.K, np.maximum(1.0, 1.0 + np.abs(sol.Z[:, :, 0])))
    lin.validate()


def test_assembly_growth_violation():
    mdl = make_model("brownian-1d")
    base = make_driver("pure-quadratic-gamma", mdl)
    liar = DriverSpec(
        F=lambda t, x, y, z: 2.0 * np.sum(z * z, axis=1), Phi=base.Phi, phi_sup=1.0, C_growth=1.0, alpha=0.5,
        grad_x_F=base.grad_x_F, grad_y_F=base.grad_y_F, grad_z_F=lambda t, x, y, z: 4.0 * z, grad_Phi=base.grad_Phi,
    )
    b = simulate_forward(mdl, GRID, 2000, [0.0], 0)
    sol = solve_quadratic_bsde(base, b, GRID, BasisSpec())
    var = simulate_variational(mdl, GRID, b, [1.0])
    with pytest.raises(ValidationError, match="grad_z F"):
        assemble_linear_coeffs(liar, b, sol, var, GRID)


def test_assembly_shape_mismatch(quad_setup):
    _, drv, batch, sol, var, _ = quad_setup
    small = simulate_forward(make_model("brownian-1d"), GRID, 10, [0.0], 0)
    with pytest.raises(ShapeError):
        assemble_linear_coeffs(drv, small, sol, var, GRID)


def test_linear_coeffs_validation():
    n, K = 5, 3
    lin = zero_lin(n, K, np.zeros(n))
    lin.K[0, 0] = 0.5
    with pytest.raises(ValidationError, match="bounded below"):
        lin.validate()
    with pytest.raises(ShapeError):
        LinearCoeffs(a=np.zeros((n, K)), b=np.zeros((n, K + 1, 1)), inhom=np.zeros((n, K)), terminal=np.zeros(n),
                     K=np.ones((n, K)), f_mag=np.zeros((n, K)))


# ------------------------------------------------------------ regression solver


def test_regression_constant_terminal():
    b = simulate_forward(make_model("brownian-1d"), GRID, 1000, [0.0], 0)
    g = solve_gradient_regression(zero_lin(1000, 50, np.full(1000, 0.3)), b, GRID, BasisSpec())
    np.testing.assert_allclose(g.G, 0.3, atol=1e-12)
    np.testing.assert_allclose(g.Hz, 0.0, atol=1e-9)


def test_regression_zero_driver_matches_quadrature():
    mdl = make_model("brownian-1d")
    b = simulate_forward(mdl, GRID, 50_000, [0.5], 1)
    lin = zero_lin(50_000, 50, sech2(b.X[:, -1, 0]))
    g = solve_gradient_regression(lin, b, GRID, BasisSpec())
    assert abs(g.g0 - gaussian_expectation(sech2, 0.5, 1.0)) <= 1e-2


def test_regression_matches_cole_hopf_gradient(quad_setup):
    _, _, batch, _, _, lin = quad_setup
    g = solve_gradient_regression(lin, batch, GRID, BasisSpec())
    assert abs(g.g0 - CH_GRADIENT) <= 2e-2
    assert np.array_equal(g.G[:, -1], lin.terminal)


def test_regression_linear_in_direction():
    mdl = make_model("linear-multi-d", dim=2)
    drv = make_driver("bounded-smooth", mdl)
    b = simulate_forward(mdl, GRID, 4000, [0.2, -0.1], 2)
    sol = solve_quadratic_bsde(drv, b, GRID, BasisSpec())
    h1, h2 = np.array([1.0, 0.0]), np.array([0.5, -2.0])

    def G(h):
        var = simulate_variational(mdl, GRID, b, h)
        return solve_gradient_regression(assemble_linear_coeffs(drv, b, sol, var, GRID), b, GRID, BasisSpec()).G

    total = G(h1 + h2)
    assert np.max(np.abs(total - G(h1) - G(h2))) <= 1e-10 * np.max(np.abs(total))


# ------------------------------------------------------------ Girsanov solver


def test_girsanov_no_measure_change():
    b = simulate_forward(make_model("brownian-1d"), GRID, 20_000, [0.0], 4)
    lin = zero_lin(20_000, 50, sech2(b.X[:, -1, 0]))
    g = solve_gradient_girsanov(lin, b, GRID)
    assert np.all(g.weights == 1.0)
    assert g.g0 == pytest.approx(lin.terminal.mean(), rel=1e-12)
    assert g.meta["ess"] == pytest.approx(20_000)


def test_girsanov_discount_only():
    n = 5000
    b = simulate_forward(make_model("brownian-1d"), GRID, n, [0.0], 4)
    z = np.zeros((n, 50))
    lin = LinearCoeffs(a=np.full((n, 50), -0.4), b=z[:, :, None], inhom=z, terminal=np.ones(n),
                       K=np.ones((n, 50)), f_mag=z)
    g = solve_gradient_girsanov(lin, b, GRID)
    assert g.g0 == pytest.approx(math.exp(-0.4), rel=1e-12)


def test_girsanov_matches_oracle_within_standard_errors(quad_setup):
    _, _, batch, sol, _, lin = quad_setup
    g = solve_gradient_girsanov(lin, batch, GRID)
    # the weights use the regression Z, whose bias adds to the sampling error
    assert abs(g.g0 - CH_GRADIENT) <= 3 * g.meta["g0_se"] + 2e-2
    assert np.array_equal(g.G[:, -1], lin.terminal)
    assert np.all(g.weights > 0)


def test_girsanov_and_regression_agree(quad_setup):
    _, _, batch, _, _, lin = quad_setup
    a = solve_gradient_regression(lin, batch, GRID, BasisSpec()).g0
    b = solve_gradient_girsanov(lin, batch, GRID).g0
    assert abs(a - b) <= 3e-2


def test_weights_are_martingale(quad_setup):
    _, _, batch, _, _, lin = quad_setup
    g = solve_gradient_girsanov(lin, batch, GRID)
    assert np.all(np.abs(g.meta["weight_mean"] - 1.0) <= 3 * g.meta["weight_se"] + 1e-15)


def test_degenerate_weights_are_reported():
    n = 2000
    b = simulate_forward(make_model("brownian-1d"), GRID, n, [0.0], 0)
    z = np.zeros((n, 50))
    huge = np.full((n, 50, 1), 30.0)
    lin = LinearCoeffs(a=z, b=huge, inhom=z, terminal=np.ones(n), K=np.full((n, 50), 30.0), f_mag=z)
    with pytest.raises(ImportanceSamplingError, match="effective sample size"):
        solve_gradient_girsanov(lin, b, GRID)


def test_log_weights_start_at_zero(quad_setup):
    _, _, batch, _, _, lin = quad_setup
    log_w, log_e = girsanov_weights(lin, batch, GRID)
    assert not log_w[:, 0].any() and not log_e[:, 0].any()


@pytest.mark.parametrize("model_id", sorted(MODELS))
def test_dual_solver_agreement_on_catalog(model_id):
    mdl = make_model(model_id)
    drv = make_driver("bounded-smooth", mdl)
    x0 = np.full(mdl.dim_state, 0.3)
    b = simulate_forward(mdl, GRID, 20_000, x0, 8)
    sol = solve_quadratic_bsde(drv, b, GRID, BasisSpec())
    var = simulate_variational(mdl, GRID, b, np.ones(mdl.dim_state))
    lin = assemble_linear_coeffs(drv, b, sol, var, GRID)
    a = solve_gradient_regression(lin, b, GRID, BasisSpec()).g0
    g = solve_gradient_girsanov(lin, b, GRID).g0
    assert abs(a - g) <= 3e-2


# ------------------------------------------------------------ bound chain


def test_gradient_within_apriori_bound(quad_setup):
    _, _, batch, sol, _, lin = quad_setup
    G = solve_gradient_regression(lin, batch, GRID, BasisSpec()).G
    n_hat = estimate_bmo_norm(sol, batch, GRID, BasisSpec()).value
    params = BmoParams.from_norm(n_hat, 1.0, 0.5)
    p = float(params.p_star) + 1.0
    p_upper = 2.0 * p
    data = float(np.mean(np.abs(lin.terminal) ** p_upper) ** (1.0 / p_upper))
    bound = apriori_y_bound(p, IntegrabilitySpec(p_upper, data), params)
    measured = float(np.mean(np.max(np.abs(G), axis=1) ** p) ** (1.0 / p))
    assert measured <= bound


# ------------------------------------------------------------ finite differences


def test_fd_linear_terminal_is_slope_for_every_eps():
    mdl = make_model("brownian-1d")
    z = make_driver("zero", mdl)
    lin = DriverSpec(F=z.F, Phi=lambda x: 0.7 * x[:, 0], phi_sup=0.0, C_growth=1.0, alpha=0.5,
                     grad_x_F=z.grad_x_F, grad_y_F=z.grad_y_F, grad_z_F=z.grad_z_F,
                     grad_Phi=lambda x: np.full_like(x, 0.7))
    grid = TimeGrid.uniform(0.0, 1.0, 10)
    for eps in (1e-1, 1e-3, 1e-4):
        fd = finite_difference_gradient(lin, mdl, grid, [0.0], [1.0], eps, 0, BasisSpec(), n_paths=2000)
        assert fd == pytest.approx(0.7, abs=1e-8)


@pytest.mark.parametrize("eps", [1e-3, 1e-4])
def test_fd_matches_cole_hopf_gradient(quad_setup, eps):
    mdl, drv, *_ = quad_setup
    fd = finite_difference_gradient(drv, mdl, GRID, [0.0], [1.0], eps, 3, BasisSpec())
    assert abs(fd - CH_GRADIENT) <= 2e-2 + eps**2


def test_fd_richardson_order():
    mdl = make_model("brownian-1d")
    drv = make_driver("pure-quadratic-gamma", mdl)
    grid = TimeGrid.uniform(0.0, 1.0, 20)
    fd = [finite_difference_gradient(drv, mdl, grid, [0.0], [1.0], e, 1, BasisSpec(), n_paths=5000)
          for e in (0.2, 0.1, 0.05)]
    ratio = (fd[0] - fd[1]) / (fd[1] - fd[2])
    assert 3.0 < ratio < 5.0


def test_fd_rejects_nonpositive_eps(quad_setup):
    mdl, drv, *_ = quad_setup
    with pytest.raises(DomainError):
        finite_difference_gradient(drv, mdl, GRID, [0.0], [1.0], 0.0, 0, BasisSpec())


@pytest.mark.slow
def test_gradient_fd_gap_shrinks_to_floor():
    mdl = make_model("brownian-1d")
    drv = make_driver("pure-quadratic-gamma", mdl)
    grid = TimeGrid.uniform(0.0, 1.0, 25)
    floor = 5e-3
    for seed in range(5):
        b = simulate_forward(mdl, grid, 20_000, [0.0], seed)
        sol = solve_quadratic_bsde(drv, b, grid, BasisSpec())
        lin = assemble_linear_coeffs(drv, b, sol, simulate_variational(mdl, grid, b, [1.0]), grid)
        g0 = solve_gradient_regression(lin, b, grid, BasisSpec()).g0
        gaps = [abs(g0 - finite_difference_gradient(drv, mdl, grid, [0.0], [1.0], e, seed, BasisSpec(), 20_000))
                for e in (0.5, 0.25, 0.1)]
        assert all(b <= a + floor for a, b in zip(gaps, gaps[1:]))


# ------------------------------------------------------------ reverse Hoelder


def test_reverse_holder_unit_weights():
    params = BmoParams.from_norm(0.3, 1.0, 0.5)
    q = interior_exponent(params.q_star)
    rep = check_reverse_holder_empirical(np.ones((100, 11)), q, params)
    assert rep.max_ratio == 1.0 and rep.passed
    assert rep.bound >= 2.0


def test_reverse_holder_lognormal_closed_form():
    n, kappa, q = 200_000, 0.5, 1.1
    b = simulate_forward(make_model("brownian-1d"), GRID, n, [0.0], 21)
    z = np.zeros((n, 50))
    lin = LinearCoeffs(a=z, b=np.full((n, 50, 1), kappa), inhom=z, terminal=np.ones(n), K=np.ones((n, 50)), f_mag=z)
    w = np.exp(girsanov_weights(lin, b, GRID)[0])
    params = BmoParams.from_norm(kappa, 1.0, 0.5)
    rep = check_reverse_holder_empirical(w, q, params)
    exact = np.exp(q * (q - 1) * kappa**2 * (1.0 - GRID.nodes) / 2)
    assert np.all(np.abs(rep.per_node_mean - exact) <= 3 * rep.per_node_se + 1e-15)


def test_reverse_holder_quadratic_weights(quad_setup):
    _, _, batch, sol, _, lin = quad_setup
    g = solve_gradient_girsanov(lin, batch, GRID)
    n_hat = estimate_bmo_norm(sol, batch, GRID, BasisSpec()).value
    params = BmoParams.from_norm(n_hat, 1.0, 0.5)
    rep = check_reverse_holder_empirical(g, interior_exponent(params.q_star), params, features=batch.X)
    assert rep.passed, (rep.max_ratio, rep.bound)


def test_reverse_holder_rejects_q_outside():
    params = BmoParams.from_norm(0.5, 1.0, 0.5)
    with pytest.raises(DomainError):
        check_reverse_holder_empirical(np.ones((10, 3)), float(critical_exponent(0.5)) + 0.1, params)
    with pytest.raises(ShapeError):
        check_reverse_holder_empirical(np.ones(10), 1.01, params)
