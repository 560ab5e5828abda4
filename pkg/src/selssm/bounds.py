"""Closed-form generalization quantities for the selective SSM class.

Hidden constants and logarithmic factors of the capacity terms are set to 1,
so capacities are bound *shapes* (trends in T, norms and dimensions), not
literal probabilities.
"""

import itertools
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ParameterError
from .numkit import mixed_norm, softplus, spectral_norm
from .ssm import embed, spectral_abscissa

SERIES_WINDOW = 1e-3


@dataclass
class BoundAssumptions:
    b_u: float = 1.0
    b_b: float = 1.0
    b_c: float = 1.0
    b_w: float = 1.0
    b_q: float = 1.0
    b_a: float = 1.0
    m_a: float = 1.0
    m_b: float = 1.0
    m_c: float = 1.0
    m_w: float = 1.0
    m_q: float = 1.0
    p: float = 0.0
    s_a: float = -0.1
    eta: float = 1e-3
    T: int = 100
    N: int = 4
    d: int = 16
    m: int = 1000
    delta: float = 0.05
    c_l: float = 1.0
    l_l: float = 1.0

    def problems(self):
        """List of violated invariants, empty when valid."""
        out = []
        for name in ("b_u", "b_b", "b_c", "b_w", "b_q", "b_a", "m_a", "m_b", "m_c", "m_w", "m_q", "eta", "c_l", "l_l"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0")
        for name in ("T", "N", "d", "m"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                out.append(f"{name} must be an integer >= 1")
        if not 0 < self.delta < 1:
            out.append("delta must lie in (0, 1)")
        if self.s_a + self.eta == 0:
            out.append("s_a + eta must be nonzero")
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                out.append(f"{f.name} must be finite")
        return out

    def validate(self):
        probs = self.problems()
        if probs:
            raise ParameterError("invalid assumptions: " + "; ".join(probs))
        return self

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ParameterError(f"unknown fields: {', '.join(unknown)}")
        return cls(**doc).validate()


@dataclass
class BoundReport:
    rho_a: float
    m_delta: float
    s1: float
    s2: float
    capacity: float
    capacity_linear_attention: float
    gap_bound: float
    gap_bound_linear_attention: float
    rademacher_lower_bound: object  # float, or None when s_a < 0
    regime: str
    alpha_valid: bool
    note: str = "capacities are modulo logarithmic factors and unit hidden constants"

    def to_dict(self):
        return asdict(self)


def rho_a(assume):
    """Per-step growth factor (1 + e^(p - b_q b_u))^(s_a + eta)."""
    expo = assume.s_a + assume.eta
    if expo == 0:
        raise ParameterError("s_a + eta must be nonzero")
    return math.exp(expo * softplus(assume.p - assume.b_q * assume.b_u))


def m_delta(assume):
    """Largest possible step size softplus(p + b_q b_u)."""
    return softplus(assume.p + assume.b_q * assume.b_u)


def _pow(rho, T):
    try:
        return math.exp(T * math.log(rho))
    except OverflowError:
        return math.inf


def _power_sums(T):
    """sum_{t<T} t^k for k = 0..4."""
    n = T - 1
    return (
        float(T),
        n * T / 2.0,
        n * T * (2 * n + 1) / 6.0,
        (n * T / 2.0) ** 2,
        n * T * (2 * n + 1) * (3 * n * n + 3 * n - 1) / 30.0,
    )


def _series(x, T, shift):
    # sum_t t^shift e^{x t} expanded in x; used when |T x| is small
    P = _power_sums(T)
    return sum(x**k / math.factorial(k) * P[k + shift] for k in range(5 - shift))


def s1(rho, T):
    """sum_{t<T} rho^t.

    Near rho = 1 a Taylor expansion in ln(rho) replaces the closed form; at
    rho = 1 it gives the limit T exactly.
    """
    if rho <= 0:
        raise ParameterError("rho must be positive")
    x = math.log(rho)
    if abs(T * x) < SERIES_WINDOW:
        return _series(x, T, 0)
    if rho < 1:
        return -math.expm1(T * x) / (1.0 - rho)
    return (_pow(rho, T) - 1.0) / (rho - 1.0)


def s2(rho, T):
    """sum_{t<T} t rho^t = rho (1 - rho^T)/(1 - rho)^2 - T rho^T/(1 - rho); T(T-1)/2 at rho = 1.

    Uses the same expansion as :func:`s1` near rho = 1.
    """
    if rho <= 0:
        raise ParameterError("rho must be positive")
    if T == 1:
        return 0.0
    x = math.log(rho)
    if abs(T * x) < SERIES_WINDOW:
        return _series(x, T, 1)
    rT = _pow(rho, T)
    if math.isinf(rT):
        return math.inf
    return rho * -math.expm1(T * x) / (1.0 - rho) ** 2 - T * rT / (1.0 - rho)


def capacity_ssm(assume):
    """Capacity of the selective SSM class.

    M_d b_w b_u^3 b_b b_c b_a S2 (M_d^(2/3) N^(1/3) d^(1/3) + b_q^(2/3) b_u^(2/3))^(3/2),
    with M_d the maximal step size and S2 evaluated at rho_a.
    """
    md = m_delta(assume)
    inner = md ** (2 / 3) * (assume.N * assume.d) ** (1 / 3) + (assume.b_q * assume.b_u) ** (2 / 3)
    scale = md * assume.b_w * assume.b_u**3 * assume.b_b * assume.b_c * assume.b_a * inner**1.5
    S = s2(rho_a(assume), assume.T)
    return 0.0 if S == 0 else scale * S


def capacity_linear_attention(b_w, b_b, b_c, b_u, T):
    for v in (b_w, b_b, b_c, b_u, T):
        if not v > 0:
            raise ParameterError("linear attention capacity needs positive inputs")
    return T * b_w * b_b * b_c * b_u**3


def generalization_gap(capacity, assume):
    """Two-term gap bound for a class with log-cover C^2/eps^2.

    Returns (gap, alpha_valid) where alpha_valid says whether the optimal
    Dudley cut-off 3 l_l C / sqrt(m) stays below the loss bound c_l.
    """
    if not capacity > 0:
        raise ParameterError("capacity must be positive")
    m, c_l, l_l = assume.m, assume.c_l, assume.l_l
    sqm = math.sqrt(m)
    first = 12.0 * l_l * capacity / sqm * (1.0 + math.log(c_l * sqm / (3.0 * capacity)))
    second = 3.0 * c_l * math.sqrt(math.log(2.0 / assume.delta) / (2.0 * m))
    return first + second, 3.0 * l_l * capacity / sqm <= c_l


def cover_log_size_ac(m_a, N, d, eps):
    """Log covering number of diagonal-block state matrices: 2 M_A^2 N d / eps^2 * ln(sqrt(2) N d)."""
    if not eps > 0:
        raise ParameterError("eps must be positive")
    return 2.0 * m_a**2 * N * d / eps**2 * math.log(math.sqrt(2.0) * N * d)


def cover_log_size_linear(b_u, m_w, d1, d2, eps):
    """Log covering number of {W u : ||W||_{1,1} <= m_w}: b_u^2 m_w^2 / eps^2 * ln(2 d1 d2 + 1)."""
    if not eps > 0:
        raise ParameterError("eps must be positive")
    return b_u**2 * m_w**2 / eps**2 * math.log(2.0 * d1 * d2 + 1.0)


def restricted_output(s_a, T):
    """Output of the scalar restricted model with unit inputs: ((1+s)^T - 1)/s, or T at s = 0."""
    if s_a == 0:
        return float(T)
    return math.expm1(T * math.log1p(s_a)) / s_a


def rademacher_lower_bound(b_w, s_a, T, m):
    """b_w ((1+s_a)^T - 1)/s_a sqrt(2/(pi m)), and b_w T sqrt(2/(pi m)) at s_a = 0."""
    if s_a < 0:
        raise ParameterError("the lower bound is stated for s_a >= 0")
    if T < 1 or m < 1:
        raise ParameterError("T and m must be >= 1")
    return b_w * restricted_output(s_a, T) * math.sqrt(2.0 / (math.pi * m))


def exact_rademacher_restricted(b_w, s_a, T, m):
    """Empirical Rademacher complexity of {w z : |w| <= b_w} by enumerating all 2^m sign vectors."""
    if m > 20:
        raise ParameterError("exact enumeration is limited to m <= 20")
    total = sum(abs(sum(signs)) for signs in itertools.product((-1, 1), repeat=m))
    return restricted_output(s_a, T) * b_w / m * total / 2**m


def mc_rademacher_restricted(b_w, s_a, T, m, trials, seed, return_stderr=False):
    """Monte-Carlo estimate of the restricted class's empirical Rademacher complexity.

    The supremum over |w| <= b_w is attained at b_w sign(sum sigma), so each trial
    contributes (z/m) b_w |sum sigma|. The sum of m Rademacher signs is drawn
    exactly as 2 Binomial(m, 1/2) - m.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    sums = np.abs(2 * rng.binomial(m, 0.5, size=trials) - m)
    vals = restricted_output(s_a, T) * b_w / m * sums
    est = float(vals.mean())
    if return_stderr:
        return est, float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return est


def regime(s_a):
    if s_a < 0:
        return "stable"
    return "marginal" if s_a == 0 else "unstable"


def bound_report(assume):
    assume.validate()
    rho = rho_a(assume)
    cap = capacity_ssm(assume)
    cap_la = capacity_linear_attention(assume.b_w, assume.b_b, assume.b_c, assume.b_u, assume.T)
    if cap > 0 and math.isfinite(cap):
        gap, alpha_ok = generalization_gap(cap, assume)
    else:
        gap, alpha_ok = (0.0, True) if cap == 0 else (math.inf, False)
    gap_la, _ = generalization_gap(cap_la, assume)
    return BoundReport(
        rho_a=rho,
        m_delta=m_delta(assume),
        s1=s1(rho, assume.T),
        s2=s2(rho, assume.T),
        capacity=cap,
        capacity_linear_attention=cap_la,
        gap_bound=gap,
        gap_bound_linear_attention=gap_la,
        rademacher_lower_bound=(
            rademacher_lower_bound(assume.b_w, assume.s_a, assume.T, assume.m) if assume.s_a >= 0 else None
        ),
        regime=regime(assume.s_a),
        alpha_valid=alpha_ok,
    )


@dataclass
class NormRecord:
    s_a: float
    abs_p: float
    q_l2: float
    wb_l2: float
    wb_l11: float
    wc_l2: float
    wc_l11: float
    ac_l2: float
    max_u_l2: float

    def as_row(self):
        return [getattr(self, f.name) for f in fields(self)]


NORM_COLUMNS = tuple(f.name for f in fields(NormRecord))


def audit_norms(params, data):
    """Parameter and input norms tracked during training.

    ``data`` is a dataset split or a (m, T) array of token ids. The state
    matrix is diagonal, so its spectral norm is the largest |entry|.
    """
    tokens = data.arrays()[0] if hasattr(data, "arrays") else np.asarray(data)
    if tokens.size == 0:
        raise ParameterError("audit needs a nonempty dataset")
    used = np.unique(tokens)
    return NormRecord(
        s_a=spectral_abscissa(params.a_diag),
        abs_p=abs(params.p),
        q_l2=float(np.linalg.norm(params.q)),
        wb_l2=spectral_norm(params.w_b),
        wb_l11=mixed_norm(params.w_b, 1, 1),
        wc_l2=spectral_norm(params.w_c),
        wc_l11=mixed_norm(params.w_c, 1, 1),
        ac_l2=float(np.max(np.abs(params.a_diag))),
        max_u_l2=float(np.max(np.linalg.norm(embed(used, params.embedding), axis=1))),
    )
