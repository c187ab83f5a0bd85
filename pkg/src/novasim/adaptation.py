"""Per-client quality selection.

The continuous selector maximizes a strictly concave per-segment objective
(quality pulled toward the running mean, minus rate penalties scaled by the
rebuffer-risk and cost-risk trackers) over the segment's tradeoff span.
A finite variant restricts the argmax to the available representations,
and a rate-matching baseline with buffer hysteresis is included for
comparison runs.

Risk trackers `b` and `d` are stored in step-scaled seconds: every update
multiplies a seconds-valued quantity by the step size, so dividing by
`hb_scale` (defaults to the step size) recovers seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .qr_model import QrTradeoff, QualityOutOfRange, eval_rate, subgradient


class EmptyChoiceSet(ValueError):
    pass


@dataclass(frozen=True)
class UtilitySpec:
    """QoE shaping functions and risk-response families.

    ue: fairness curve applied to per-client QoE ("identity" or "alpha_fair"
        with `ue_alpha` and domain shift `ue_shift`, i.e. log(e + shift) at
        alpha=1).
    uv: variability penalty, "linear" (eta*v) or "quadratic" (eta*v^2).
    uq: per-segment quality transform for the generalized-mean QoE variant
        ("identity" or "log" with shift `uq_shift`).
    hb/hd: rebuffer- and cost-risk responses.  hb follows a linear ramp plus
        a shifted quadratic: h0*(x + max(x - knee, 0)^2) where x is the
        stored risk value converted to seconds via hb_scale.  hd is a linear
        ramp above its floor.  Both are zero at/below their floors.
    """

    ue: str = "identity"
    ue_alpha: float = 1.0
    ue_shift: float = 1.0
    uv: str = "linear"
    uv_eta: float = 0.05
    uq: str = "identity"
    uq_shift: float = 1.0
    hb_h0: float = 0.005
    hb_knee: float = 20.0
    hb_scale: float = 0.05
    hd_slope: float = 10.0
    b_floor: float = 0.0
    d_floor: float = 0.0

    def ue_value(self, e: float) -> float:
        if self.ue == "identity":
            return e
        if self.ue == "alpha_fair":
            x = e + self.ue_shift
            if x <= 0:
                raise ValueError(f"QoE {e} below the alpha-fair domain shift")
            if self.ue_alpha == 1.0:
                return math.log(x)
            return x ** (1.0 - self.ue_alpha) / (1.0 - self.ue_alpha)
        raise ValueError(f"unknown ue family {self.ue!r}")

    def ue_prime(self, e: float) -> float:
        if self.ue == "identity":
            return 1.0
        if self.ue == "alpha_fair":
            x = e + self.ue_shift
            if x <= 0:
                raise ValueError(f"QoE {e} below the alpha-fair domain shift")
            return x ** (-self.ue_alpha)
        raise ValueError(f"unknown ue family {self.ue!r}")

    def uv_value(self, v: float) -> float:
        if self.uv == "linear":
            return self.uv_eta * v
        if self.uv == "quadratic":
            return self.uv_eta * v * v
        raise ValueError(f"unknown uv family {self.uv!r}")

    def uv_prime(self, v: float) -> float:
        if self.uv == "linear":
            return self.uv_eta
        if self.uv == "quadratic":
            return 2.0 * self.uv_eta * v
        raise ValueError(f"unknown uv family {self.uv!r}")

    def uq_value(self, q: float) -> float:
        if self.uq == "identity":
            return q
        if self.uq == "log":
            return math.log(q + self.uq_shift)
        raise ValueError(f"unknown uq family {self.uq!r}")

    def uq_prime(self, q: float) -> float:
        if self.uq == "identity":
            return 1.0
        if self.uq == "log":
            return 1.0 / (q + self.uq_shift)
        raise ValueError(f"unknown uq family {self.uq!r}")

    def hb(self, b: float) -> float:
        x = max(b - self.b_floor, 0.0) / self.hb_scale
        over = max(x - self.hb_knee, 0.0)
        return self.hb_h0 * (x + over * over)

    def hd(self, d: float) -> float:
        return self.hd_slope * max(d - self.d_floor, 0.0)

    def hb_inverse(self, y: float) -> float:
        """Bisection inverse of hb on [b_floor, inf); valid for y >= 0."""
        return _monotone_inverse(self.hb, y, self.b_floor)

    def hd_inverse(self, y: float) -> float:
        return _monotone_inverse(self.hd, y, self.d_floor)


def _monotone_inverse(fn, y: float, floor: float) -> float:
    if y <= 0.0:
        return floor
    hi = floor + 1.0
    while fn(hi) < y:
        hi = floor + 2.0 * (hi - floor)
        if hi - floor > 1e18:
            raise ValueError("inverse target out of reach")
    lo = floor
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if fn(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class ClientParams:
    """Learned state of one client plus its preference constants.

    m, mu: mean-quality trackers (mu tracks the transformed quality when a
    generalized mean is configured); v: variance tracker; b, d: rebuffer-
    and cost-risk scalars (step-scaled seconds, clamped at their floors);
    lam: mean segment duration; sigma: mean segment compression rate.
    """

    m: float
    mu: float
    v: float
    b: float
    d: float
    lam: float
    sigma: float = 0.0
    q_max: float = 100.0
    beta_bar: float = 0.0
    p_bar: float = math.inf
    p_d: float = 0.0
    epsilon: float = 0.05

    def copy(self) -> "ClientParams":
        return replace(self)


@dataclass(frozen=True)
class KktCertificate:
    residual: float
    gamma: float
    gamma_bar: float


def rate_penalty_weight(params: ClientParams, u: UtilitySpec) -> float:
    """Combined multiplier on the segment rate in the selection objective."""
    w = u.hb(params.b) / (1.0 + params.beta_bar)
    if params.p_d > 0.0 and math.isfinite(params.p_bar):
        w += params.p_d * u.hd(params.d) / params.p_bar
    return w


def phi_q(q: float, params: ClientParams, u: UtilitySpec, f: QrTradeoff) -> float:
    """Per-segment selection objective at quality q."""
    amp = u.ue_prime(params.mu - u.uv_value(params.v))
    pull = u.uv_prime(params.v)
    kappa = rate_penalty_weight(params, u)
    return amp * (u.uq_value(q) - pull * (q - params.m) ** 2) - kappa * eval_rate(f, q)


def _objective_closure(params: ClientParams, u: UtilitySpec, f: QrTradeoff):
    amp = u.ue_prime(params.mu - u.uv_value(params.v))
    pull = u.uv_prime(params.v)
    kappa = rate_penalty_weight(params, u)
    m = params.m

    def value(q):
        return amp * (u.uq_value(q) - pull * (q - m) ** 2) - kappa * eval_rate(f, q)

    def deriv_interval(q):
        # superdifferential of the objective: [right, left] slopes of f flip sign
        base = amp * (u.uq_prime(q) - 2.0 * pull * (q - m))
        s_lo, s_hi = subgradient(f, q)
        return base - kappa * s_hi, base - kappa * s_lo

    return value, deriv_interval, amp, pull, kappa


def argmax_selection(f: QrTradeoff, amp: float, pull: float, m: float,
                     kappa: float, u: UtilitySpec) -> float:
    """Unique maximizer of amp*(uq(q) - pull*(q-m)^2) - kappa*rate(q).

    With the identity quality transform the stationarity condition is
    linear on each tradeoff piece, so a single knot walk is exact; other
    transforms fall back to golden-section bracketing plus bisection on
    the sign of the right-derivative, snapping kink optima to the knot.
    """
    qs = f.qualities
    if len(qs) == 1:
        return qs[0]
    if u.uq == "identity" and amp > 0.0 and pull > 0.0:
        rs = f.rates
        denom = 2.0 * amp * pull
        q_prev = qs[0]
        for j in range(len(qs) - 1):
            slope = (rs[j + 1] - rs[j]) / (qs[j + 1] - qs[j])
            cand = m + (amp - kappa * slope) / denom
            if cand <= q_prev:
                return q_prev  # kink (or lower bound) is optimal
            if cand < qs[j + 1]:
                return cand
            q_prev = qs[j + 1]
        return qs[-1]
    return _maximize_scalar_generic(f, u, amp, pull, m, kappa)


def _maximize_scalar(params: ClientParams, u: UtilitySpec, f: QrTradeoff) -> float:
    _, _, amp, pull, kappa = _objective_closure(params, u, f)
    return argmax_selection(f, amp, pull, params.m, kappa, u)


def _maximize_scalar_generic(f: QrTradeoff, u: UtilitySpec, amp: float,
                             pull: float, m: float, kappa: float) -> float:
    def value(q):
        return amp * (u.uq_value(q) - pull * (q - m) ** 2) - kappa * eval_rate(f, q)

    def deriv(q):
        base = amp * (u.uq_prime(q) - 2.0 * pull * (q - m))
        s_lo, s_hi = subgradient(f, q)
        return base - kappa * s_hi, base - kappa * s_lo

    q_lo, q_hi = f.q_min, f.q_max
    span = q_hi - q_lo
    if span <= 0.0:
        return q_lo
    if deriv(q_lo)[0] <= 0.0:
        return q_lo
    if deriv(q_hi)[1] >= 0.0:
        return q_hi

    a, b = q_lo, q_hi
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = value(c), value(d)
    for _ in range(12):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = value(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = value(d)

    # establish sign bracket: right-derivative positive at lo, nonpositive at hi
    lo, hi = a, b
    if deriv(lo)[0] <= 0.0:
        hi = lo
        lo = q_lo
    if deriv(hi)[0] > 0.0:
        lo = hi
        hi = q_hi
    tol = 1e-12 * span
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if deriv(mid)[0] > 0.0:
            lo = mid
        else:
            hi = mid

    # snap to a knot when the kink's superdifferential contains zero
    pad = tol + 1e-12 * span
    for k in f.qualities:
        if lo - pad <= k <= hi + pad:
            g_r, g_l = deriv(k)
            if g_r <= 0.0 <= g_l:
                return k
    return 0.5 * (lo + hi)


def solve_qnova(
    params: ClientParams, u: UtilitySpec, f: QrTradeoff
) -> tuple[float, KktCertificate]:
    """Continuous quality selection with a stationarity certificate."""
    q = _maximize_scalar(params, u, f)
    cert = kkt_certificate_qnova(q, params, u, f)
    return q, cert


def kkt_certificate_qnova(
    q: float, params: ClientParams, u: UtilitySpec, f: QrTradeoff
) -> KktCertificate:
    """Minimal stationarity violation at q over admissible multipliers.

    The lower/upper boundary multipliers are allowed only when q sits at
    the respective bound; at kinks the rate-map subgradient interval widens
    the set of achievable stationarity values.
    """
    if q < f.q_min - 1e-12 or q > f.q_max + 1e-12:
        raise QualityOutOfRange(f"quality {q} outside [{f.q_min}, {f.q_max}]")
    _, deriv, _, _, _ = _objective_closure(params, u, f)
    g_lo, g_hi = deriv(q)  # achievable stationarity values, an interval
    span = f.q_max - f.q_min
    atol = 1e-9 * max(span, 1.0)
    gamma = 0.0
    gamma_bar = 0.0
    at_lower = q <= f.q_min + atol
    at_upper = q >= f.q_max - atol
    lo, hi = g_lo, g_hi
    if at_lower:
        gamma = max(0.0, -g_hi)
        hi = math.inf
    if at_upper:
        gamma_bar = max(0.0, g_lo)
        lo = -math.inf
    residual = max(0.0, lo, -hi)
    return KktCertificate(residual=residual, gamma=gamma, gamma_bar=gamma_bar)


def kkt_residual_qnova(
    q: float, params: ClientParams, u: UtilitySpec, f: QrTradeoff
) -> float:
    return kkt_certificate_qnova(q, params, u, f).residual


def solve_qnova_finite(
    params: ClientParams, u: UtilitySpec, f: QrTradeoff, choices
) -> float:
    """Argmax of the selection objective over a finite quality set.

    Ties go to the smaller quality.
    """
    if not choices:
        raise EmptyChoiceSet("no quality choices supplied")
    best_q = None
    best_val = -math.inf
    for q in sorted(choices):
        val = phi_q(q, params, u, f)
        if val > best_val:
            best_val = val
            best_q = q
    return best_q


@dataclass
class RmState:
    cautious: bool = False
    aggressive: bool = False


@dataclass(frozen=True)
class RmThresholds:
    cautious_set: float = 10.0
    cautious_reset: float = 15.0
    aggressive_set: float = 30.0
    aggressive_reset: float = 25.0
    panic: float = 5.0


def select_rm(
    buffer_seconds: float,
    rho_bps: float,
    f: QrTradeoff,
    choices,
    price: tuple[float, float],
    state: RmState,
    thresholds: RmThresholds = RmThresholds(),
) -> tuple[int, RmState]:
    """Rate-matching selection with buffer hysteresis.

    Returns the 1-based representation index into the ascending `choices`
    list and the updated hysteresis state.  The base pick is the largest
    representation whose rate fits 0.99x the mean throughput and the
    per-segment price cap; hysteresis nudges it one step, and a nearly
    empty buffer forces the lowest representation.
    """
    if not choices:
        raise EmptyChoiceSet("no quality choices supplied")
    choices = sorted(choices)
    p_d, p_bar = price
    n = len(choices)

    new_state = RmState(cautious=state.cautious, aggressive=state.aggressive)
    if buffer_seconds < thresholds.cautious_set:
        new_state.cautious = True
    elif buffer_seconds > thresholds.cautious_reset:
        new_state.cautious = False
    if buffer_seconds > thresholds.aggressive_set:
        new_state.aggressive = True
    elif buffer_seconds < thresholds.aggressive_reset:
        new_state.aggressive = False

    if buffer_seconds < thresholds.panic:
        return 1, new_state

    base = 0
    cap = 0
    for j, q in enumerate(choices, start=1):
        rate = eval_rate(f, q)
        meets_price = p_d * rate <= p_bar or not math.isfinite(p_bar)
        if meets_price:
            cap = j
            if rate <= 0.99 * rho_bps:
                base = j
    if base == 0:
        base = 1
    idx = base + (1 if new_state.aggressive else 0) - (1 if new_state.cautious else 0)
    idx = max(1, min(idx, n))
    if cap >= 1:
        idx = min(idx, cap)
    return idx, new_state
