"""Reverse-Hölder / BMO constants and closed-form a-priori bounds.

All functions are pure.  Notation:

* ``phi_reverse_holder`` is the decreasing map whose level set ``phi(q) = N``
  defines the critical reverse-Hölder exponent ``q_star`` of a BMO martingale
  with norm ``N``.
* ``reverse_holder_constant`` is the constant ``K(q, N)`` in
  ``E[E_T^q | F_tau] <= K(q, N) E_tau^q``.
* ``exp_moment_bound(p)`` bounds ``E[exp(p int_0^T K_s^{2 alpha} ds)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConstantInvalidError, ConvergenceError, DomainError

__all__ = [
    "BmoParams",
    "Exponent",
    "IntegrabilitySpec",
    "phi_reverse_holder",
    "critical_exponent",
    "conjugate_exponent",
    "interior_exponent",
    "reverse_holder_constant",
    "exp_moment_bound",
    "apriori_y_bound",
    "apriori_z_bound",
    "z_bound_constants",
]

BISECTION_XTOL = 1e-12
SERIES_RTOL = 1e-16
SERIES_MAX_TERMS = 100_000


class Exponent(float):
    """An exponent ``q > 1`` that also carries ``log(q - 1)`` exactly.

    Critical exponents for large BMO norms sit within ``1e-50`` of one (and
    closer), which a plain double cannot resolve.  Arithmetic on an
    ``Exponent`` degrades to ``float``; the functions of this module read
    ``log_excess`` when present.
    """

    log_excess: float

    def __new__(cls, log_excess: float):
        value = math.inf if log_excess > 709.0 else 1.0 + math.exp(log_excess)
        obj = super().__new__(cls, value)
        obj.log_excess = float(log_excess)
        return obj

    def __repr__(self):
        return f"Exponent(1 + exp({self.log_excess!r}))"

    def __reduce__(self):
        return (Exponent, (self.log_excess,))


def _log_excess(p: float) -> float:
    L = getattr(p, "log_excess", None)
    if L is not None:
        return L
    if not p > 1.0:
        raise DomainError(f"exponent must be > 1, got {p!r}")
    return math.log(p - 1.0)


def _phi_from_log_excess(L: float) -> float:
    eps = math.exp(L)
    if L < -30.0:
        # log(1 + 1/(2 eps)) without overflowing 1/eps
        log_term = -math.log(2.0) - L + math.log1p(2.0 * eps)
    else:
        log_term = math.log1p(0.5 * math.exp(-L))
    inner = log_term / (1.0 + eps) ** 2
    # sqrt(1 + u) - 1 written without cancellation
    return inner / (math.sqrt(1.0 + inner) + 1.0)


def phi_reverse_holder(p: float) -> float:
    """Return ``(1 + log((2p-1)/(2(p-1))) / p**2) ** 0.5 - 1`` for ``p > 1``."""
    if not isinstance(p, Exponent) and not p > 1.0:
        raise DomainError(f"phi_reverse_holder needs p > 1, got {p!r}")
    if math.isinf(p):
        return 0.0
    return _phi_from_log_excess(_log_excess(p))


def critical_exponent(N: float) -> Exponent:
    """Solve ``phi_reverse_holder(q) = N`` by bisection with bracket doubling.

    The search runs over ``log(q - 1)``, where ``phi`` is still strictly
    decreasing, and stops when the bracket cannot shrink in floating point.
    """
    if not N > 0.0 or math.isinf(N):
        raise DomainError(f"critical_exponent needs finite N > 0, got {N!r}")
    lo, hi = -1.0, 1.0
    while _phi_from_log_excess(lo) <= N:
        lo *= 2.0
        if lo < -1e300:
            raise ConvergenceError(f"no bracket found for N={N!r}")
    while _phi_from_log_excess(hi) >= N:
        hi *= 2.0
        if hi > 700.0:
            raise ConvergenceError(f"no bracket found for N={N!r}")
    for _ in range(5000):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _phi_from_log_excess(mid) > N:
            lo = mid
        else:
            hi = mid
        if hi - lo <= BISECTION_XTOL * 1e-3 * max(1.0, abs(lo)):
            break
    lo_gap = abs(_phi_from_log_excess(lo) - N)
    hi_gap = abs(_phi_from_log_excess(hi) - N)
    return Exponent(lo if lo_gap < hi_gap else hi)


def conjugate_exponent(q: float) -> float:
    """Hölder conjugate ``q / (q - 1)``; exact involution on :class:`Exponent`."""
    if isinstance(q, Exponent):
        return Exponent(-q.log_excess)
    if not q > 1.0:
        raise DomainError(f"conjugate exponent needs q > 1, got {q!r}")
    return q / (q - 1.0)


def interior_exponent(q_star: float, fraction: float = 0.5) -> Exponent:
    """The exponent with ``q - 1 = fraction * (q_star - 1)``, for ``0 < fraction < 1``.

    With ``q_star = inf`` this returns ``2``.
    """
    if not 0.0 < fraction < 1.0:
        raise DomainError(f"fraction must lie in (0, 1), got {fraction!r}")
    if math.isinf(q_star):
        return Exponent(0.0)
    return Exponent(_log_excess(q_star) + math.log(fraction))


@dataclass(frozen=True)
class BmoParams:
    """BMO norm bound ``N`` with horizon and exponent; derives ``q_star, p_star``."""

    N: float
    T: float
    alpha: float
    q_star: float = math.inf
    p_star: float = 1.0

    def __post_init__(self):
        if not self.N >= 0.0 or not math.isfinite(self.N):
            raise DomainError(f"BMO norm N must be finite and >= 0, got {self.N!r}")
        if not self.T > 0.0:
            raise DomainError(f"horizon T must be > 0, got {self.T!r}")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie strictly in (0, 1), got {self.alpha!r}")

    @classmethod
    def from_norm(cls, N: float, T: float, alpha: float) -> "BmoParams":
        """Build parameters, solving for the critical exponent.

        At ``N = 0`` the reverse-Hölder inequality holds for every ``q``; we
        represent this as ``q_star = inf`` and ``p_star = 1``.
        """
        cls(N, T, alpha)  # validates before the root solve
        if N == 0.0:
            return cls(N, T, alpha, math.inf, 1.0)
        q = critical_exponent(N)
        return cls(N, T, alpha, q, conjugate_exponent(q))


@dataclass(frozen=True)
class IntegrabilitySpec:
    """Integrability exponent ``p_upper`` of the data and its ``L^p_upper`` norm."""

    p_upper: float
    data_norm: float

    def check(self, params: BmoParams) -> None:
        if not self.p_upper > params.p_star:
            raise DomainError(
                f"p_upper={self.p_upper!r} must exceed p_star={params.p_star!r}"
            )
        if not self.data_norm >= 0.0:
            raise DomainError(f"data_norm must be >= 0, got {self.data_norm!r}")


def _below_critical(q: float, q_star: float) -> bool:
    if not isinstance(q, Exponent) and not q > 1.0:
        return False
    if math.isinf(q_star):
        return not math.isinf(q)
    return _log_excess(q) < _log_excess(q_star)


def reverse_holder_constant(q: float, params: BmoParams) -> float:
    """``K(q, N) = 2 / (1 - 2(q-1)/(2q-1) * exp(q^2 (N^2 + 2N)))``.

    Raises :class:`ConstantInvalidError` when the denominator is not positive;
    the closed form is then unusable even if ``q < q_star``.
    """
    if not _below_critical(q, params.q_star):
        raise DomainError(f"q must lie in (1, q_star={params.q_star!r}), got {q!r}")
    N = params.N
    L = _log_excess(q)
    eps = math.exp(L)
    # 2(2q-1) / ((2q-1) - 2(q-1) e), the same fraction cleared of 1/(2q-1);
    # the subtracted term is formed in log space so large N cannot overflow
    two_q_minus_one = 1.0 + 2.0 * eps
    log_sub = math.log(2.0) + L + q * q * (N * N + 2.0 * N)
    ratio = math.exp(min(log_sub - math.log(two_q_minus_one), 1.0))
    denom = two_q_minus_one * (1.0 - ratio) if ratio < 1.0 else 0.0
    if not denom > 0.0:
        raise ConstantInvalidError(
            f"constant formula invalid at this (q,N)=({q!r},{N!r}): denominator {denom:.6g} <= 0"
        )
    value = 2.0 * two_q_minus_one / denom
    if not math.isfinite(value):
        raise ConstantInvalidError(f"constant formula invalid at this (q,N)=({q!r},{N!r})")
    return value


def exp_moment_bound(p: float, params: BmoParams, *, return_terms: bool = False):
    """Series bound on ``E[exp(p int_0^T K^{2 alpha} ds)]``.

    Sums ``(p T^{1-alpha})^n N^{2 n alpha} / (n!)^{1-alpha}`` over ``n >= 0``
    until a term drops below ``1e-16`` times the running sum.  The bound
    comes from Jensen on ``<M>_T^alpha`` and the moment estimate
    ``E[<M>_T^n] <= n! N^{2n}``.  With ``return_terms`` the list of partial
    sums is returned as well.
    """
    if not p >= 1.0:
        raise DomainError(f"exp_moment_bound needs p >= 1, got {p!r}")
    a = params.alpha
    total = 1.0
    partial = [total]
    if params.N == 0.0:
        return (total, partial) if return_terms else total
    log_base = math.log(p) + (1.0 - a) * math.log(params.T) + 2.0 * a * math.log(params.N)
    for n in range(1, SERIES_MAX_TERMS + 1):
        log_term = n * log_base - (1.0 - a) * math.lgamma(n + 1.0)
        if log_term > 700.0:
            raise ConvergenceError(
                f"exp-moment series overflows at n={n} (p={p!r}, N={params.N!r})"
            )
        term = math.exp(log_term)
        total += term
        partial.append(total)
        # terms decrease once n! outgrows the geometric factor
        if term <= SERIES_RTOL * total and (1.0 - a) * math.log(n + 1.0) > log_base:
            return (total, partial) if return_terms else total
    raise ConvergenceError(
        f"exp-moment series did not converge within {SERIES_MAX_TERMS} terms "
        f"(p={p!r}, T={params.T!r}, alpha={a!r}, N={params.N!r})"
    )


def _eta(m: float, params: BmoParams) -> float:
    return exp_moment_bound(m, params) ** (1.0 / m)


def apriori_y_bound(p: float, spec: IntegrabilitySpec, params: BmoParams) -> float:
    """Bound on ``||Y||_{S^p}`` for a stochastic-Lipschitz linear BSDE.

    ``K(r', N)^{1/r'} (p/(p-r))^{1/r} eta(p p^*/(p^* - p)) ||data||_{p^*}``
    with ``r = (p + p_star)/2`` and ``r' = r/(r-1)``.
    """
    spec.check(params)
    if not params.p_star < p < spec.p_upper:
        raise DomainError(
            f"p must lie in (p_star={params.p_star!r}, p_upper={spec.p_upper!r}), got {p!r}"
        )
    if spec.data_norm == 0.0:
        return 0.0
    r = 0.5 * (p + params.p_star)
    q = conjugate_exponent(r)
    k = reverse_holder_constant(q, params)
    m = p * spec.p_upper / (spec.p_upper - p)
    return (
        k ** ((r - 1.0) / r)
        * (p / (p - r)) ** (1.0 / r)
        * _eta(m, params)
        * spec.data_norm
    )


def z_bound_constants(p: float) -> dict:
    """The explicit BDG/Hölder constants used by :func:`apriori_z_bound`.

    ``c_p = 4^{max(p/2, 1)}`` absorbs the power of a four-term sum,
    ``d_p = (4 sqrt(2) p)^{p/2}`` is the BDG constant, and absorbing half of
    the ``Z`` energy into the left side gives ``C_p = 2 c_p + d_p^2``.
    """
    c_p = 4.0 ** max(p / 2.0, 1.0)
    d_p = (4.0 * math.sqrt(2.0) * p) ** (p / 2.0)
    C_p = 2.0 * c_p + d_p * d_p
    C = C_p ** (1.0 / p) if p >= 1.0 else C_p
    return {"c_p": c_p, "d_p": d_p, "C_p": C_p, "C": C}


def apriori_z_bound(p: float, q: float, norms: dict) -> float:
    """``C(p, q) (y_sp + f_int + y_sq * k_energy)`` bounding ``||Z||_{M^p}``.

    ``norms`` holds ``y_sp = ||Y||_{S^p}``, ``f_int = ||int f||_p``,
    ``y_sq = ||Y||_{S^q}`` and ``k_energy``, the ``L^{pq/(q-p)}`` norm of
    ``(int K^{2 alpha} + K^2 ds)^{1/2}``.
    """
    if not 0.0 < p < q:
        raise DomainError(f"need 0 < p < q, got p={p!r}, q={q!r}")
    vals = {k: float(norms[k]) for k in ("y_sp", "f_int", "y_sq", "k_energy")}
    for k, v in vals.items():
        if not v >= 0.0:
            raise DomainError(f"norm {k} must be >= 0, got {v!r}")
    C = z_bound_constants(p)["C"]
    return C * (vals["y_sp"] + vals["f_int"] + vals["y_sq"] * vals["k_energy"])
