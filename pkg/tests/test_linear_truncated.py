import numpy as np
import pytest

from bsdelab.catalog import make_driver, make_model, stochastic_k_problem
from bsdelab.errors import StepSizeError, ValidationError
from bsdelab.forward import TimeGrid, simulate_forward, simulate_variational
from bsdelab.gradient_bsde import assemble_linear_coeffs, solve_gradient_girsanov
from bsdelab.linear import LinearCoeffs, running_energy, solve_linear_backward, solve_linear_bsde_truncated
from bsdelab.quad_bsde import solve_quadratic_bsde
from bsdelab.regression import BasisSpec

GRID = TimeGrid.uniform(0.0, 1.0, 50)


def bounded_problem(n, seed):
    b = simulate_forward(make_model("brownian-1d"), GRID, n, [0.0], seed)
    z = np.zeros((n, 50))
    lin = LinearCoeffs(a=z, b=z[:, :, None], inhom=z, terminal=np.tanh(b.X[:, -1, 0]), K=np.ones((n, 50)), f_mag=z)
    return b, lin


def test_truncation_inactive_on_bounded_data():
    b, lin = bounded_problem(5000, 0)
    # running energy reaches T = 1 at the horizon; tanh is bounded by 1
    tr = solve_linear_bsde_truncated(lin.terminal, lin, b, GRID, BasisSpec(), n_trunc=2, ladder=[2])
    plain = solve_linear_backward(lin.terminal, lin.a, lin.b, lin.inhom, b, GRID, BasisSpec())
    assert tr.meta["levels"][2].meta["active_fraction"] == 1.0
    assert tr.y0[0] == pytest.approx(plain.y0[0], abs=1e-12)


def test_default_ladder_doubles():
    b, lin = bounded_problem(500, 1)
    tr = solve_linear_bsde_truncated(lin.terminal, lin, b, GRID, BasisSpec(), n_trunc=12)
    assert tr.meta["ladder"] == [1, 2, 4, 8, 12]
    assert [c["to"] for c in tr.meta["cauchy"]] == [2, 4, 8, 12]


def test_running_energy():
    b, lin = bounded_problem(10, 2)
    A = running_energy(lin, GRID)
    np.testing.assert_allclose(A[:, -1], 1.0)
    assert np.all(np.diff(A, axis=1) > 0)


def test_cauchy_increments_decrease_on_stochastic_k_model():
    for seed in range(5):
        b = simulate_forward(make_model("brownian-1d"), GRID, 20_000, [0.0], seed)
        xi, lin = stochastic_k_problem(b, GRID)
        tr = solve_linear_bsde_truncated(xi, lin, b, GRID, BasisSpec(), 32, ladder=[4, 8, 16, 32])
        inc = [c["mean_sup"] for c in tr.meta["cauchy"]]
        assert inc[0] > inc[1] > inc[2] > 0


def test_truncated_matches_girsanov_on_quadratic_linearisation():
    mdl = make_model("brownian-1d")
    drv = make_driver("pure-quadratic-gamma", mdl)
    b = simulate_forward(mdl, GRID, 100_000, [0.0], 3)
    sol = solve_quadratic_bsde(drv, b, GRID, BasisSpec())
    lin = assemble_linear_coeffs(drv, b, sol, simulate_variational(mdl, GRID, b, [1.0]), GRID)
    tr = solve_linear_bsde_truncated(lin.terminal, lin, b, GRID, BasisSpec(), 64)
    gi = solve_gradient_girsanov(lin, b, GRID)
    assert abs(tr.y0[0] - gi.g0) <= 3e-2


def test_truncation_rejects_undominated_coefficients():
    b, lin = bounded_problem(50, 0)
    lin.a[:] = 5.0
    with pytest.raises(ValidationError, match="coefficient a"):
        solve_linear_bsde_truncated(lin.terminal, lin, b, GRID, BasisSpec(), 4)


def test_singular_implicit_step():
    b, lin = bounded_problem(50, 0)
    coarse = TimeGrid.uniform(0.0, 1.0, 2)
    b = simulate_forward(make_model("brownian-1d"), coarse, 50, [0.0], 0)
    a = np.full((50, 2), 3.0)
    with pytest.raises(StepSizeError):
        solve_linear_backward(np.ones(50), a, np.zeros((50, 2, 1)), np.zeros((50, 2)), b, coarse, BasisSpec())


def test_levels_must_be_positive():
    b, lin = bounded_problem(50, 0)
    with pytest.raises(ValueError):
        solve_linear_bsde_truncated(lin.terminal, lin, b, GRID, BasisSpec(), 4, ladder=[0, 4])
