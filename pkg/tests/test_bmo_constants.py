import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bsdelab.bmo_constants import (
    BmoParams,
    Exponent,
    IntegrabilitySpec,
    apriori_y_bound,
    apriori_z_bound,
    conjugate_exponent,
    critical_exponent,
    exp_moment_bound,
    interior_exponent,
    phi_reverse_holder,
    reverse_holder_constant,
    z_bound_constants,
)
from bsdelab.errors import ConstantInvalidError, ConvergenceError, DomainError

mp.mp.dps = 50


def phi_mp(p, eps=None):
    """Reference phi; pass ``eps = p - 1`` directly when it underflows against 1."""
    if eps is None:
        p = mp.mpf(p)
        eps = p - 1
    else:
        eps = mp.mpf(eps)
        p = 1 + eps
    return mp.sqrt(1 + mp.log((1 + 2 * eps) / (2 * eps)) / p**2) - 1


# ---------------------------------------------------------------- phi


def test_phi_at_two_matches_closed_form():
    assert phi_reverse_holder(2.0) == pytest.approx(0.0494600, abs=1e-6)
    assert phi_reverse_holder(2.0) == pytest.approx(float(phi_mp(2)), rel=1e-15)


def test_phi_golden():
    assert phi_reverse_holder(2.0) == 0.04945999305692501


def test_phi_vanishes_at_infinity():
    assert 0.0 < phi_reverse_holder(1e6) < 1e-6


def test_phi_ordering():
    assert phi_reverse_holder(1.5) > phi_reverse_holder(2.0) > phi_reverse_holder(3.0)


@pytest.mark.parametrize("p", [1.0, 0.5, -3.0, float("nan")])
def test_phi_rejects_domain(p):
    with pytest.raises(DomainError):
        phi_reverse_holder(p)


def test_phi_strictly_decreasing_on_log_grid():
    grid = 1.0 + np.logspace(-6, 4, 100)
    vals = [phi_reverse_holder(float(p)) for p in grid]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@given(st.floats(min_value=1.0 + 1e-9, max_value=1e6))
def test_phi_agrees_with_high_precision(p):
    assert phi_reverse_holder(p) == pytest.approx(float(phi_mp(p)), rel=1e-11)


def test_phi_on_exponent_close_to_one():
    # q - 1 = e^{-200}: not representable as a float offset from 1
    L = -200.0
    expected = phi_mp(None, eps=mp.e**L)
    assert phi_reverse_holder(Exponent(L)) == pytest.approx(float(expected), rel=1e-13)


# ---------------------------------------------------------------- q*


def test_critical_exponent_inverts_phi_at_two():
    assert float(critical_exponent(phi_reverse_holder(2.0))) == pytest.approx(2.0, abs=1e-8)


def test_critical_exponent_large_norm_near_one():
    q = critical_exponent(100.0)
    assert 1.0 <= float(q) < 1.01
    assert q.log_excess < -1000.0


def test_critical_exponent_golden():
    assert float(critical_exponent(0.05)) == pytest.approx(1.9939080711957418, rel=1e-13)


@pytest.mark.parametrize("N", [1e-3, 1e-2, 0.01, 0.1, 1.0, 10.0, 100.0])
def test_critical_exponent_inverse_consistency(N):
    q = critical_exponent(N)
    assert abs(phi_reverse_holder(q) - N) <= 1e-10


@given(st.floats(min_value=1e-3, max_value=100.0))
def test_critical_exponent_property(N):
    assert abs(phi_reverse_holder(critical_exponent(N)) - N) <= 1e-10


@pytest.mark.parametrize("N", [0.0, -1.0, float("inf")])
def test_critical_exponent_rejects(N):
    with pytest.raises(DomainError):
        critical_exponent(N)


# ---------------------------------------------------------------- conjugates


@pytest.mark.parametrize("q, expected", [(2.0, 2.0), (3.0, 1.5), (1.25, 5.0)])
def test_conjugate_examples(q, expected):
    assert conjugate_exponent(q) == pytest.approx(expected, rel=1e-15)


@given(st.floats(min_value=1.0 + 1e-6, max_value=1e6))
def test_conjugate_involution(q):
    # plain floats lose digits to the q - 1 cancellation
    assert conjugate_exponent(conjugate_exponent(q)) == pytest.approx(q, rel=1e-9)


def test_conjugate_exact_on_exponent():
    q = critical_exponent(10.0)
    back = conjugate_exponent(conjugate_exponent(q))
    assert back.log_excess == q.log_excess


@pytest.mark.parametrize("q", [1.0, 0.3])
def test_conjugate_rejects(q):
    with pytest.raises(DomainError):
        conjugate_exponent(q)


# ---------------------------------------------------------------- params


def test_params_derive_conjugate_pair():
    prm = BmoParams.from_norm(0.05, 1.0, 0.5)
    assert abs(1 / prm.p_star + 1 / prm.q_star - 1) <= 1e-12
    assert abs(phi_reverse_holder(prm.q_star) - 0.05) <= 1e-10


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
def test_params_reject_alpha_endpoints(alpha):
    with pytest.raises(DomainError):
        BmoParams.from_norm(0.1, 1.0, alpha)


def test_params_reject_bad_horizon_and_norm():
    with pytest.raises(DomainError):
        BmoParams(0.1, 0.0, 0.5)
    with pytest.raises(DomainError):
        BmoParams(-0.1, 1.0, 0.5)


def test_integrability_spec_requires_p_upper_above_p_star():
    prm = BmoParams.from_norm(0.05, 1.0, 0.5)
    with pytest.raises(DomainError):
        IntegrabilitySpec(float(prm.p_star), 1.0).check(prm)
    IntegrabilitySpec(float(prm.p_star) + 0.1, 1.0).check(prm)


def test_interior_exponent_fraction():
    q_star = critical_exponent(1.0)
    q = interior_exponent(q_star, 0.25)
    assert q.log_excess == pytest.approx(q_star.log_excess + math.log(0.25))
    assert float(interior_exponent(math.inf)) == 2.0


# ---------------------------------------------------------------- K(q, N)


def test_reverse_holder_constant_exact_at_zero_norm():
    assert reverse_holder_constant(2.0, BmoParams.from_norm(0.0, 1.0, 0.5)) == 6.0


def test_reverse_holder_constant_limit_near_one():
    prm = BmoParams.from_norm(0.05, 1.0, 0.5)
    assert reverse_holder_constant(1.0 + 1e-12, prm) == pytest.approx(2.0, rel=1e-10)


def test_reverse_holder_constant_independent_evaluation():
    prm = BmoParams.from_norm(0.05, 1.0, 0.5)
    q, N = mp.mpf("1.01"), mp.mpf("0.05")
    expected = 2 / (1 - 2 * (q - 1) / (2 * q - 1) * mp.e ** (q**2 * (N**2 + 2 * N)))
    got = reverse_holder_constant(1.01, prm)
    assert got == pytest.approx(float(expected), rel=1e-13)
    assert got == pytest.approx(2.044507004582612, rel=1e-13)


def test_reverse_holder_constant_denominator_vanishes_at_critical():
    # the closed form's pole sits exactly at q*, so just below it the
    # constant is either huge or reported unusable, never silently small
    prm = BmoParams.from_norm(0.65, 1.0, 0.5)
    q = Exponent(prm.q_star.log_excess - 1e-14)
    try:
        assert reverse_holder_constant(q, prm) > 1e6
    except ConstantInvalidError as exc:
        assert "invalid at this" in str(exc)


@pytest.mark.parametrize("N", [50.0, 1000.0])
def test_reverse_holder_constant_large_norm_no_overflow(N):
    prm = BmoParams.from_norm(N, 1.0, 0.5)
    value = reverse_holder_constant(interior_exponent(prm.q_star), prm)
    assert value == pytest.approx(4.0, rel=1e-6)


@pytest.mark.parametrize("q", [1.0, 0.9])
def test_reverse_holder_constant_rejects_q_below_one(q):
    with pytest.raises(DomainError):
        reverse_holder_constant(q, BmoParams.from_norm(0.05, 1.0, 0.5))


def test_reverse_holder_constant_rejects_q_above_critical():
    prm = BmoParams.from_norm(0.05, 1.0, 0.5)
    with pytest.raises(DomainError):
        reverse_holder_constant(float(prm.q_star) + 0.01, prm)


@pytest.mark.parametrize("N", [0.0, 0.01, 0.05, 0.2])
def test_reverse_holder_constant_at_least_two_and_monotone(N):
    prm = BmoParams.from_norm(N, 1.0, 0.5)
    upper = 3.0 if math.isinf(prm.q_star) else float(prm.q_star)
    vals = []
    for q in np.linspace(1.0 + 1e-6, upper, 60)[:-1]:
        try:
            vals.append(reverse_holder_constant(float(q), prm))
        except ConstantInvalidError:
            break
    assert len(vals) > 5
    assert min(vals) >= 2.0
    assert all(b >= a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- eta series


def test_exp_moment_bound_zero_norm_is_one():
    assert exp_moment_bound(3.0, BmoParams.from_norm(0.0, 1.0, 0.5)) == 1.0


def test_exp_moment_bound_reference_series():
    # p = 1, T = 1, alpha = 1/2, N = 1: sum_n 1 / sqrt(n!)
    expected = mp.nsum(lambda n: 1 / mp.sqrt(mp.factorial(n)), [0, mp.inf])
    got = exp_moment_bound(1.0, BmoParams.from_norm(1.0, 1.0, 0.5))
    assert got == pytest.approx(float(expected), rel=1e-14)
    assert got == pytest.approx(3.4695063145210474, rel=1e-14)


@pytest.mark.parametrize("N", [0.01, 0.5, 2.0])
def test_exp_moment_bound_monotone_in_p(N):
    prm = BmoParams.from_norm(N, 1.5, 0.3)
    assert exp_moment_bound(2.0, prm) >= exp_moment_bound(1.0, prm)


def test_exp_moment_bound_partial_sums():
    total, partial = exp_moment_bound(2.0, BmoParams.from_norm(1.0, 1.0, 0.4), return_terms=True)
    assert all(b >= a for a, b in zip(partial, partial[1:]))
    assert total >= max(partial)


def test_exp_moment_bound_rejects_p_below_one():
    with pytest.raises(DomainError):
        exp_moment_bound(0.5, BmoParams.from_norm(0.1, 1.0, 0.5))


def test_exp_moment_bound_reports_non_convergence():
    with pytest.raises(ConvergenceError):
        exp_moment_bound(1e6, BmoParams.from_norm(50.0, 10.0, 0.9))


# ---------------------------------------------------------------- Y bound


@pytest.fixture
def y_setup():
    return BmoParams.from_norm(0.05, 1.0, 0.5), IntegrabilitySpec(8.0, 1.0)


def test_apriori_y_bound_golden(y_setup):
    prm, spec = y_setup
    assert apriori_y_bound(4.0, spec, prm) == pytest.approx(5.159791738373179, rel=1e-12)


def test_apriori_y_bound_independent_assembly(y_setup):
    prm, spec = y_setup
    p = 4.0
    r = (p + float(prm.p_star)) / 2
    rp = r / (r - 1)
    k = reverse_holder_constant(rp, prm)
    m = p * 8.0 / (8.0 - p)
    eta = exp_moment_bound(m, prm) ** (1 / m)
    expected = k ** ((r - 1) / r) * (p / (p - r)) ** (1 / r) * eta
    assert apriori_y_bound(p, spec, prm) == pytest.approx(expected, rel=1e-13)


def test_apriori_y_bound_homogeneous(y_setup):
    prm, _ = y_setup
    assert apriori_y_bound(4.0, IntegrabilitySpec(8.0, 0.0), prm) == 0.0
    one = apriori_y_bound(4.0, IntegrabilitySpec(8.0, 1.0), prm)
    two = apriori_y_bound(4.0, IntegrabilitySpec(8.0, 2.0), prm)
    assert two == pytest.approx(2 * one, rel=1e-15)


@pytest.mark.parametrize("p", [1.5, 8.0, 9.0])
def test_apriori_y_bound_rejects_p_outside(y_setup, p):
    prm, spec = y_setup
    with pytest.raises(DomainError):
        apriori_y_bound(p, spec, prm)


# ---------------------------------------------------------------- Z bound


def test_z_bound_constants_documented_choice():
    c = z_bound_constants(2.0)
    assert c["c_p"] == 4.0
    assert c["d_p"] == pytest.approx(8.0 * math.sqrt(2.0))
    assert c["C_p"] == pytest.approx(136.0)
    assert c["C"] == pytest.approx(math.sqrt(136.0))


def test_apriori_z_bound_golden():
    norms = dict(y_sp=1.0, f_int=1.0, y_sq=1.0, k_energy=1.0)
    assert apriori_z_bound(2.0, 4.0, norms) == pytest.approx(34.98571136907181, rel=1e-13)


def test_apriori_z_bound_zero_data():
    assert apriori_z_bound(2.0, 4.0, dict(y_sp=0, f_int=0, y_sq=0, k_energy=0)) == 0.0


@given(st.floats(min_value=1e-3, max_value=1e3))
def test_apriori_z_bound_homogeneous_in_data(lam):
    base = dict(y_sp=0.7, f_int=0.3, y_sq=1.2, k_energy=2.0)
    scaled = dict(y_sp=0.7 * lam, f_int=0.3 * lam, y_sq=1.2 * lam, k_energy=2.0)
    assert apriori_z_bound(2.0, 3.0, scaled) == pytest.approx(lam * apriori_z_bound(2.0, 3.0, base), rel=1e-12)


@pytest.mark.parametrize("key", ["y_sp", "f_int", "y_sq", "k_energy"])
def test_apriori_z_bound_monotone(key):
    base = dict(y_sp=0.5, f_int=0.5, y_sq=0.5, k_energy=0.5)
    bigger = dict(base, **{key: 0.9})
    assert apriori_z_bound(1.5, 3.0, bigger) >= apriori_z_bound(1.5, 3.0, base)


@pytest.mark.parametrize("p, q", [(2.0, 2.0), (3.0, 2.0), (0.0, 1.0)])
def test_apriori_z_bound_rejects(p, q):
    with pytest.raises(DomainError):
        apriori_z_bound(p, q, dict(y_sp=1, f_int=1, y_sq=1, k_energy=1))
