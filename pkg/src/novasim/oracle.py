"""Offline and stationary optimization oracles.

The stationary program maximizes fairness-shaped QoE over per-tradeoff
quality maps and per-constraint-atom allocations, subject to expected
cost and expected rebuffering-balance constraints.  It is solved by dual
decomposition: given multipliers (one rebuffering multiplier b and one
cost multiplier d per client), qualities come from per-tradeoff scalar
maximizations tied together by a mean-consistency root, and allocations
come from per-atom winner-takes-residual solves.  An initial subgradient
phase is refined by per-coordinate bisection on the complementarity
conditions, and a final feasibility program pins allocations on the
optimal face so complementary slackness holds to tolerance.

The offline finite-horizon program reduces to the stationary one under
the empirical distributions of its realized sequences (identical slots
and identical segments can share decisions at an optimum), which is how
it is solved here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .adaptation import UtilitySpec, argmax_selection
from .allocation import NoConvergence, linear_winner
from .qr_model import QrTradeoff, eval_rate, subgradient


class InfeasibleModel(ValueError):
    pass


class TooLarge(ValueError):
    pass


@dataclass(frozen=True)
class FlAtom:
    """One (tradeoff, length) support point with its probability."""

    tradeoff: QrTradeoff
    length: float
    prob: float


@dataclass(frozen=True)
class ClientModel:
    atoms: tuple[FlAtom, ...]

    def __post_init__(self):
        total = sum(a.prob for a in self.atoms)
        if not self.atoms or abs(total - 1.0) > 1e-9:
            raise ValueError(f"atom probabilities sum to {total}, expected 1")

    @property
    def mean_length(self) -> float:
        return sum(a.prob * a.length for a in self.atoms)


@dataclass(frozen=True)
class OraclePrefs:
    beta_bar: float = 0.0
    p_bar: float = math.inf
    p_d: float = 0.0


@dataclass(frozen=True)
class StationaryModel:
    """Finite stationary distributions of constraints and segment draws."""

    peaks: tuple[tuple[float, ...], ...]  # per constraint atom, bits/slot
    constraint_probs: tuple[float, ...]
    clients: tuple[ClientModel, ...]
    tau_slot: float = 0.01
    r_min: tuple[float, ...] = ()

    def __post_init__(self):
        total = sum(self.constraint_probs)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"constraint probabilities sum to {total}, expected 1")
        n = len(self.clients)
        for pk in self.peaks:
            if len(pk) != n:
                raise ValueError("constraint atom does not cover all clients")
        if not self.r_min:
            object.__setattr__(self, "r_min", tuple(0.0 for _ in range(n)))

    @property
    def n(self) -> int:
        return len(self.clients)


@dataclass
class OptstatSolution:
    """Primal decisions, multipliers and derived statistics."""

    quality: list[dict[int, float]]  # per client: unique-tradeoff idx -> q
    tradeoffs: list[list[QrTradeoff]]  # per client: unique tradeoffs
    allocation: list[list[float]]  # per constraint atom: bits per slot
    b_mult: list[float]
    d_mult: list[float]
    chi: list[float]
    omega: list[list[float]]
    gamma: list[dict[int, float]]
    gamma_bar: list[dict[int, float]]
    value: float
    m_stat: list[float]
    v_stat: list[float]
    sigma_stat: list[float]
    lam_stat: list[float]
    rho_stat: list[float]
    dual_value: float = math.nan
    history: list[tuple[int, float, float]] = field(default_factory=list)

    def quality_for(self, ci: int, f: QrTradeoff) -> float:
        for idx, tr in enumerate(self.tradeoffs[ci]):
            if tr.qualities == f.qualities and tr.rates == f.rates:
                return self.quality[ci][idx]
        raise KeyError("tradeoff not in model support")

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "dual_value": self.dual_value,
            "b_mult": self.b_mult,
            "d_mult": self.d_mult,
            "chi": self.chi,
            "omega": self.omega,
            "gamma": [{str(k): v for k, v in g.items()} for g in self.gamma],
            "gamma_bar": [{str(k): v for k, v in g.items()}
                          for g in self.gamma_bar],
            "m": self.m_stat,
            "v": self.v_stat,
            "sigma": self.sigma_stat,
            "lambda": self.lam_stat,
            "rho": self.rho_stat,
            "quality": [
                {str(k): v for k, v in qmap.items()} for qmap in self.quality
            ],
            "tradeoffs": [
                [[list(tr.qualities), list(tr.rates)] for tr in trs]
                for trs in self.tradeoffs
            ],
            "allocation": self.allocation,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OptstatSolution":
        tradeoffs = [
            [QrTradeoff(qualities=tuple(qs), rates=tuple(rs)) for qs, rs in trs]
            for trs in doc["tradeoffs"]
        ]
        return cls(
            quality=[{int(k): v for k, v in qmap.items()}
                     for qmap in doc["quality"]],
            tradeoffs=tradeoffs,
            allocation=[list(r) for r in doc["allocation"]],
            b_mult=list(doc["b_mult"]),
            d_mult=list(doc["d_mult"]),
            chi=list(doc["chi"]),
            omega=[list(o) for o in doc["omega"]],
            gamma=[{int(k): v for k, v in g.items()} for g in doc["gamma"]],
            gamma_bar=[{int(k): v for k, v in g.items()}
                       for g in doc["gamma_bar"]],
            value=float(doc["value"]),
            m_stat=list(doc["m"]),
            v_stat=list(doc["v"]),
            sigma_stat=list(doc["sigma"]),
            lam_stat=list(doc["lambda"]),
            rho_stat=list(doc["rho"]),
            dual_value=float(doc.get("dual_value", math.nan)),
        )


# ---------------------------------------------------------------------------
# per-client inner solve


class _ClientInner:
    """Per-client quality subproblem for fixed multipliers."""

    def __init__(self, cm: ClientModel, prefs: OraclePrefs, u: UtilitySpec):
        self.prefs = prefs
        self.u = u
        self.mean_l = cm.mean_length
        by_key: dict = {}
        self.atom_to_unique = []
        for a in cm.atoms:
            key = (a.tradeoff.qualities, a.tradeoff.rates)
            if key not in by_key:
                by_key[key] = [a.tradeoff, 0.0]
            by_key[key][1] += a.prob * a.length
            self.atom_to_unique.append(list(by_key).index(key))
        self.tradeoffs = [v[0] for v in by_key.values()]
        self.wl = [v[1] / self.mean_l for v in by_key.values()]  # weights summing to 1
        self.q_top = max(t.q_max for t in self.tradeoffs)
        self.q_bot = min(t.q_min for t in self.tradeoffs)

    def kappa(self, b: float, d: float) -> float:
        k = b / (1.0 + self.prefs.beta_bar)
        if self.prefs.p_d > 0.0 and math.isfinite(self.prefs.p_bar):
            k += self.prefs.p_d * d / self.prefs.p_bar
        return k

    def _mean_root(self, amp: float, pull: float, kappa: float) -> float:
        """Root of mean-consistency psi(m) = E[l q*(m)]/E[l] - m."""

        def psi(m):
            tot = 0.0
            for tr, w in zip(self.tradeoffs, self.wl):
                tot += w * argmax_selection(tr, amp, pull, m, kappa, self.u)
            return tot - m

        lo, hi = self.q_bot, self.q_top
        if psi(hi) >= 0.0:
            return hi
        if psi(lo) <= 0.0:
            return lo
        if self.u.uq == "identity":
            # psi is piecewise linear; bracket between its breakpoints
            denom = 2.0 * amp * pull
            pts = {lo, hi}
            for tr in self.tradeoffs:
                qs, rs = tr.qualities, tr.rates
                for j in range(len(qs) - 1):
                    slope = (rs[j + 1] - rs[j]) / (qs[j + 1] - qs[j])
                    off = (amp - kappa * slope) / denom
                    for knot in (qs[j], qs[j + 1]):
                        m_bp = knot - off
                        if lo < m_bp < hi:
                            pts.add(m_bp)
            pts = sorted(pts)
            vals = [psi(m) for m in pts]
            for a in range(len(pts) - 1):
                if vals[a] >= 0.0 >= vals[a + 1]:
                    da = vals[a] - vals[a + 1]
                    if da <= 0.0:
                        return pts[a]
                    return pts[a] + vals[a] * (pts[a + 1] - pts[a]) / da
            return hi
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if psi(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def solve(self, b: float, d: float) -> dict:
        """Fixed point over the fairness/variability derivatives."""
        u = self.u
        kappa = self.kappa(b, d)
        mu, v = 0.5 * self.q_top, 0.0
        out = None
        for it in range(200):
            amp = u.ue_prime(mu - u.uv_value(v))
            pull = u.uv_prime(v)
            m = self._mean_root(amp, pull, kappa)
            qs = [argmax_selection(tr, amp, pull, m, kappa, u) for tr in self.tradeoffs]
            mu_new = sum(w * u.uq_value(q) for w, q in zip(self.wl, qs))
            v_new = sum(w * (q - m) ** 2 for w, q in zip(self.wl, qs))
            sigma = sum(w * eval_rate(tr, q) for w, tr, q in zip(self.wl, self.tradeoffs, qs))
            e = mu_new - u.uv_value(v_new)
            out = {
                "q": qs, "m": m, "mu": mu_new, "v": v_new, "sigma": sigma,
                "value": u.ue_value(e),
                "inner": u.ue_value(e) - kappa * sigma,
                "amp": u.ue_prime(e), "pull": u.uv_prime(v_new), "kappa": kappa,
            }
            if u.ue == "identity" and u.uv == "linear":
                return out
            if abs(mu_new - mu) + abs(v_new - v) < 1e-13 * max(1.0, self.q_top):
                return out
            damp = 0.5 if it >= 10 else 1.0
            mu = mu + damp * (mu_new - mu)
            v = v + damp * (v_new - v)
        return out

    def sigma_at(self, b: float, d: float) -> float:
        return self.solve(b, d)["sigma"]

    def recover(self, b: float, d: float, sigma_target: float,
                via: str = "b") -> dict:
        """Pick the maximizer with the target mean rate at a degenerate point.

        With identity fairness and a linear variability penalty the inner
        objective can be flat along a uniform quality shift exactly at the
        critical multiplier, so the argmax is a set.  The two one-sided
        limits (perturbing the rebuffer or cost multiplier) bracket it;
        points on the segment between them stay optimal (the argmax set is
        convex), and the mean rate varies continuously along it, so
        bisection pins the target.
        """
        sol0 = self.solve(b, d)
        if abs(sol0["sigma"] - sigma_target) <= 1e-9 * max(1.0, sigma_target):
            return sol0
        if via == "b":
            db = max(abs(b) * 1e-9, 1e-15)
            hi = self.solve(max(b - db, 0.0), d)  # smaller multiplier: higher rate
            lo = self.solve(b + db, d)
        else:
            dd = max(abs(d) * 1e-9, 1e-15)
            hi = self.solve(b, max(d - dd, 0.0))
            lo = self.solve(b, d + dd)
        if not (lo["sigma"] - 1e-9 <= sigma_target <= hi["sigma"] + 1e-9):
            return sol0
        # the argmax set is the flat interval of the mean-consistency root:
        # bisect the mean tracker between the one-sided limits, re-solving
        # the per-tradeoff stationarity exactly at each trial mean
        u = self.u
        kappa = self.kappa(b, d)
        amp, pull = sol0["amp"], sol0["pull"]

        def eval_at(m):
            qs = [argmax_selection(tr, amp, pull, m, kappa, u)
                  for tr in self.tradeoffs]
            sigma = sum(w * eval_rate(tr, q)
                        for w, tr, q in zip(self.wl, self.tradeoffs, qs))
            return qs, sigma

        m_lo, m_hi = lo["m"], hi["m"]
        for _ in range(200):
            mid = 0.5 * (m_lo + m_hi)
            _qs, sigma = eval_at(mid)
            if sigma < sigma_target:
                m_lo = mid
            else:
                m_hi = mid
        m = 0.5 * (m_lo + m_hi)
        qs, sigma = eval_at(m)
        mu = sum(w * u.uq_value(q) for w, q in zip(self.wl, qs))
        v = sum(w * (q - m) ** 2 for w, q in zip(self.wl, qs))
        e = mu - u.uv_value(v)
        return {
            "q": qs, "m": m, "mu": mu, "v": v, "sigma": sigma,
            "value": u.ue_value(e), "inner": u.ue_value(e) - kappa * sigma,
            "amp": u.ue_prime(e), "pull": u.uv_prime(v), "kappa": kappa,
        }

    def solve_with_cost(self, b: float) -> tuple[float, dict]:
        """Cost multiplier satisfying complementary slackness, given b."""
        p = self.prefs
        if p.p_d <= 0.0 or not math.isfinite(p.p_bar):
            return 0.0, self.solve(b, 0.0)
        sol = self.solve(b, 0.0)
        if p.p_d * sol["sigma"] / p.p_bar <= 1.0:
            return 0.0, sol
        d_hi = 1.0
        for _ in range(80):
            if p.p_d * self.sigma_at(b, d_hi) / p.p_bar <= 1.0:
                break
            d_hi *= 2.0
        else:
            raise InfeasibleModel("cost constraint unreachable even at zero quality")
        d_lo = 0.0
        for _ in range(100):
            mid = 0.5 * (d_lo + d_hi)
            if p.p_d * self.sigma_at(b, mid) / p.p_bar > 1.0:
                d_lo = mid
            else:
                d_hi = mid
        d = 0.5 * (d_lo + d_hi)
        cap_sigma = p.p_bar / p.p_d
        sol = self.solve(b, d)
        if abs(sol["sigma"] - cap_sigma) > 1e-9 * cap_sigma:
            sol = self.recover(b, d, cap_sigma, via="d")
        return d, sol

    def b_cap(self) -> float:
        """Multiplier beyond which every quality map is pinned at bottom."""
        u = self.u
        amp = max(u.ue_prime(-u.uv_value(self.q_top ** 2) + 1e-12)
                  if u.ue != "identity" else 1.0, 1.0)
        pull = max(u.uv_prime(self.q_top ** 2), u.uv_prime(0.0))
        s_min = min(
            (tr.rates[1] - tr.rates[0]) / (tr.qualities[1] - tr.qualities[0])
            for tr in self.tradeoffs if len(tr.qualities) > 1
        )
        kappa_max = amp * (abs(u.uq_prime(self.q_bot)) + 2.0 * pull * self.q_top) / s_min
        return (1.0 + self.prefs.beta_bar) * kappa_max * 4.0


# ---------------------------------------------------------------------------
# allocation helpers


def _supply(model: StationaryModel, b: list[float]) -> list[float]:
    """Expected per-client allocation under winner-takes-residual, bits/slot."""
    out = [0.0] * model.n
    for peaks, prob in zip(model.peaks, model.constraint_probs):
        r, _obj, _w = linear_winner(b, peaks, model.r_min)
        for i in range(model.n):
            out[i] += prob * r[i]
    return out


def _alloc_dual_value(model: StationaryModel, b: list[float]) -> float:
    total = 0.0
    for peaks, prob in zip(model.peaks, model.constraint_probs):
        _r, obj, _w = linear_winner(b, peaks, model.r_min)
        total += prob * obj
    return total


def _max_supply_scale(model: StationaryModel, needs_bps: list[float]) -> float:
    """Largest t with a feasible stationary allocation covering t*needs."""
    n, m = model.n, len(model.peaks)
    if all(x <= 0 for x in needs_bps):
        return math.inf
    nv = n * m + 1
    a_ub = []
    b_ub = []
    for a_idx, peaks in enumerate(model.peaks):
        row = [0.0] * nv
        for i in range(n):
            row[a_idx * n + i] = 1.0 / peaks[i]
        a_ub.append(row)
        b_ub.append(1.0)
    for i in range(n):
        if needs_bps[i] <= 0:
            continue
        row = [0.0] * nv
        for a_idx, prob in enumerate(model.constraint_probs):
            row[a_idx * n + i] = -prob
        row[-1] = needs_bps[i] * model.tau_slot
        a_ub.append(row)
        b_ub.append(0.0)
    bounds = []
    for _a in range(m):
        for i in range(n):
            bounds.append((model.r_min[i], None))
    bounds.append((0.0, None))
    cost = [0.0] * nv
    cost[-1] = -1.0
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        raise InfeasibleModel("allocation floors are jointly infeasible")
    return float(res.x[-1])


def _assemble_allocation(model: StationaryModel, b_hat: list[float],
                         needs_bps: list[float], sigma_ranges, active,
                         betas, tie_tol: float):
    """Allocations on the per-atom optimal faces with expected-rate balance.

    For active rebuffering constraints the client's mean rate is itself a
    bounded variable (its degenerate quality maps admit a range of mean
    rates), tied to the expected allocation with equality.  Returns the
    per-atom allocations and the per-client mean-rate targets (bits/s), or
    None when the face cannot meet the targets.
    """
    n, m = model.n, len(model.peaks)
    winner_sets = []
    any_positive = any(x > 0 for x in b_hat)
    for peaks in model.peaks:
        if not any_positive:
            winner_sets.append(list(range(n)))
            continue
        metrics = [b_hat[i] * peaks[i] for i in range(n)]
        top = max(metrics)
        winner_sets.append([i for i in range(n) if metrics[i] >= top * (1.0 - tie_tol)])
    nv = n * m + n  # allocations plus per-client mean-rate (bits/s) variables
    a_eq, b_eq, a_ub, b_ub = [], [], [], []
    bounds = [None] * nv
    for a_idx, peaks in enumerate(model.peaks):
        wset = winner_sets[a_idx]
        row = [0.0] * nv
        for i in range(n):
            row[a_idx * n + i] = 1.0 / peaks[i]
            if i in wset:
                bounds[a_idx * n + i] = (model.r_min[i], None)
            else:
                bounds[a_idx * n + i] = (model.r_min[i], model.r_min[i])
        if any_positive:
            a_eq.append(row)
            b_eq.append(1.0)
        else:
            a_ub.append(row)
            b_ub.append(1.0)
    for i in range(n):
        svar = n * m + i
        row = [0.0] * nv
        for a_idx, prob in enumerate(model.constraint_probs):
            row[a_idx * n + i] = prob
        if active[i]:
            lo, hi = sigma_ranges[i]
            pad = 1e-9 * max(1.0, hi)
            bounds[svar] = (max(lo - pad, 0.0) / (1.0 + betas[i]),
                            (hi + pad) / (1.0 + betas[i]))
            row[svar] = -model.tau_slot
            a_eq.append(row)
            b_eq.append(0.0)
        else:
            bounds[svar] = (0.0, 0.0)
            a_ub.append([-x for x in row])
            b_ub.append(-needs_bps[i] * model.tau_slot)
    res = linprog(
        [0.0] * nv,
        A_ub=a_ub if a_ub else None, b_ub=b_ub if b_ub else None,
        A_eq=a_eq if a_eq else None, b_eq=b_eq if b_eq else None,
        bounds=bounds, method="highs",
    )
    if not res.success:
        return None
    alloc = [[float(res.x[a_idx * n + i]) for i in range(n)] for a_idx in range(m)]
    targets = [float(res.x[n * m + i]) for i in range(n)]
    return alloc, targets


def _project_ties(model: StationaryModel, b: list[float], tie_tol: float) -> list[float]:
    """Averaging projection of the multipliers onto the detected tie manifold.

    Winner-set stationarity requires tied clients to share the per-atom
    metric exactly; near-ties from finite dual precision are snapped by
    alternating between per-atom metric means and per-client back-solves.
    """
    n = model.n
    b = list(b)
    tied_atoms = []
    for peaks in model.peaks:
        metrics = [b[i] * peaks[i] for i in range(n)]
        top = max(metrics)
        if top <= 0:
            tied_atoms.append(None)
            continue
        wset = [i for i in range(n) if metrics[i] >= top * (1.0 - tie_tol)]
        tied_atoms.append(wset if len(wset) > 1 else None)
    if not any(tied_atoms):
        return b
    for _ in range(100):
        moved = 0.0
        for a_idx, wset in enumerate(tied_atoms):
            if not wset:
                continue
            peaks = model.peaks[a_idx]
            t_c = sum(b[i] * peaks[i] for i in wset) / len(wset)
            for i in wset:
                new_bi = t_c / peaks[i]
                moved = max(moved, abs(new_bi - b[i]))
                b[i] = new_bi
        if moved <= 1e-16 * max(max(b), 1e-16):
            break
    return b


def _cvx_multipliers(model: StationaryModel, prefs: list[OraclePrefs],
                     u: UtilitySpec):
    """Rebuffering multipliers from a direct convex solve (fallback path).

    Handles degenerate duals (cost-capped clients on tight capacity) that
    the coordinate method cannot pin down.  Only the multipliers are used;
    the primal and certificate are rebuilt by the standard assembly.
    """
    import cvxpy as cp

    n = model.n
    tau = model.tau_slot
    inners = [_ClientInner(model.clients[i], prefs[i], u) for i in range(n)]
    rebuf_cons = []
    constraints = []
    objective = 0.0
    r_vars = [cp.Variable(n, nonneg=True) for _ in model.peaks]
    for a_idx, peaks in enumerate(model.peaks):
        constraints.append(cp.sum(r_vars[a_idx] / np.asarray(peaks)) <= 1.0)
        constraints.append(r_vars[a_idx] >= np.asarray(model.r_min))
    for i, inn in enumerate(inners):
        k = len(inn.tradeoffs)
        q = cp.Variable(k)
        m_aux = cp.Variable()
        sizes = cp.Variable(k)  # epigraph of the per-tradeoff rate map
        w = np.asarray(inn.wl)
        for j, tr in enumerate(inn.tradeoffs):
            constraints += [q[j] >= tr.q_min, q[j] <= tr.q_max]
            qs, rs = tr.qualities, tr.rates
            for p in range(len(qs) - 1):
                slope = (rs[p + 1] - rs[p]) / (qs[p + 1] - qs[p])
                constraints.append(sizes[j] >= rs[p] + slope * (q[j] - qs[p]))
        mean_uq = w @ q if u.uq == "identity" else None
        if mean_uq is None:
            mean_uq = cp.sum(cp.multiply(w, cp.log(q + u.uq_shift)))
        var = cp.sum(cp.multiply(w, cp.square(q - m_aux)))
        if u.uv == "linear":
            pen = u.uv_eta * var
        else:
            pen = u.uv_eta * cp.square(var)
        e = mean_uq - pen
        if u.ue == "identity":
            objective += e
        elif u.ue == "alpha_fair" and u.ue_alpha == 1.0:
            objective += cp.log(e + u.ue_shift)
        else:
            raise NoConvergence("fallback supports identity or log fairness only")
        sigma = w @ sizes
        p = prefs[i]
        if p.p_d > 0.0 and math.isfinite(p.p_bar):
            constraints.append(p.p_d * sigma / p.p_bar - 1.0 <= 0.0)
        mean_r = sum(model.constraint_probs[a] * r_vars[a][i]
                     for a in range(len(model.peaks)))
        con = sigma / (1.0 + p.beta_bar) - mean_r / tau <= 0.0
        constraints.append(con)
        rebuf_cons.append(con)
    prob = cp.Problem(cp.Maximize(objective), constraints)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise NoConvergence(f"fallback convex solve ended with {prob.status}")
    return [max(float(c.dual_value), 0.0) for c in rebuf_cons]


# ---------------------------------------------------------------------------
# main solver


def solve_optstat(model: StationaryModel, prefs: list[OraclePrefs],
                  u: UtilitySpec, max_outer: int = 100_000,
                  record_history: bool = False,
                  subgradient_iters: int = 200) -> OptstatSolution:
    n = model.n
    if len(prefs) != n:
        raise ValueError("one preference record per client required")
    inners = [_ClientInner(model.clients[i], prefs[i], u) for i in range(n)]
    tau = model.tau_slot

    # strict-feasibility screen at zero quality
    floor_sigma = [
        sum(w * tr.rate_floor for w, tr in zip(inn.wl, inn.tradeoffs))
        for inn in inners
    ]
    for i, p in enumerate(prefs):
        if p.p_d > 0.0 and math.isfinite(p.p_bar):
            if p.p_d * floor_sigma[i] >= p.p_bar:
                raise InfeasibleModel(
                    f"client {i}: cost cap below the zero-quality spend")
    needs_floor = [floor_sigma[i] / (1.0 + prefs[i].beta_bar) for i in range(n)]
    if _max_supply_scale(model, needs_floor) < 1.0 - 1e-9:
        raise InfeasibleModel("zero-quality demand exceeds network capability")

    def needs_at(b_vec):
        sols = []
        needs = []
        for i in range(n):
            d_i, sol = inners[i].solve_with_cost(b_vec[i])
            sols.append((d_i, sol))
            needs.append(sol["sigma"] / (1.0 + prefs[i].beta_bar))
        return needs, sols

    history: list[tuple[int, float, float]] = []
    b = [0.0] * n
    needs, sols = needs_at(b)
    caps = [inn.b_cap() for inn in inners]

    if _max_supply_scale(model, needs) < 1.0:
        # rebuffering binds: subgradient warm-up, then coordinate bisection
        it = 0
        for t in range(1, subgradient_iters + 1):
            supply = _supply(model, b)
            grads = [needs[i] - supply[i] / tau for i in range(n)]
            scale = [caps[i] / (abs(needs[i]) + 1e-12) for i in range(n)]
            step = 0.05 / math.sqrt(t)
            b = [max(0.0, b[i] + step * scale[i] * grads[i]) for i in range(n)]
            needs, sols = needs_at(b)
            it = t
            if record_history:
                history.append(
                    (t, _primal_bound(model, prefs, u, inners, sols),
                     _dual_value(model, tau, b, sols)))

        for sweep in range(60):
            moved = 0.0
            for i in range(n):
                new_bi = _solve_coordinate(model, inners, prefs, tau, b, i,
                                           caps[i])
                moved = max(moved, abs(new_bi - b[i]))
                b[i] = new_bi
            it += 1
            if record_history:
                needs, sols = needs_at(b)
                history.append(
                    (it, _primal_bound(model, prefs, u, inners, sols),
                     _dual_value(model, tau, b, sols)))
            if moved <= 1e-13 * max(1.0, max(caps)):
                break
        needs, sols = needs_at(b)

    # assembly: allocations on the optimal face with exact complementarity
    betas = [p.beta_bar for p in prefs]

    def attempt(b_vec):
        b_scale = max(max(b_vec), 1e-12)
        active_v = [b_vec[i] > 1e-7 * b_scale for i in range(n)]
        base = [b_vec[i] if active_v[i] else 0.0 for i in range(n)]
        for tie_tol in (1e-9, 1e-7, 1e-5, 1e-3):
            b_try = _project_ties(model, base, tie_tol)
            ranges = [None] * n
            for i in range(n):
                if not active_v[i]:
                    continue
                p = prefs[i]
                cap_sigma = (p.p_bar / p.p_d
                             if p.p_d > 0.0 and math.isfinite(p.p_bar)
                             else math.inf)
                rng, b_star = _locate_sigma_cliff(
                    inners[i], b_try[i], 0.0, rel=max(tie_tol, 1e-6))
                b_try[i] = b_star
                lo_s, hi_s = rng
                if lo_s >= cap_sigma:
                    ranges[i] = (cap_sigma, cap_sigma)  # cost keeps it pinned
                else:
                    ranges[i] = (lo_s, min(hi_s, cap_sigma))
            needs_t, sols_t = needs_at(b_try)
            for i in range(n):
                if ranges[i] is None:  # inactive: the mean rate is fixed
                    ranges[i] = (sols_t[i][1]["sigma"], sols_t[i][1]["sigma"])
            out = _assemble_allocation(model, b_try, needs_t, ranges, active_v,
                                       betas, max(tie_tol, 1e-9))
            if out is None:
                continue
            alloc_t, targets = out
            ok = True
            for i in range(n):
                if not active_v[i]:
                    continue
                sigma_target = targets[i] * (1.0 + betas[i])
                if abs(sols_t[i][1]["sigma"] - sigma_target) <= 1e-9 * max(1.0, sigma_target):
                    continue
                d_i = sols_t[i][0]
                p = prefs[i]
                cap_sigma = (p.p_bar / p.p_d
                             if p.p_d > 0.0 and math.isfinite(p.p_bar)
                             else math.inf)
                if d_i > 0.0 and sigma_target < cap_sigma * (1.0 - 1e-12):
                    d_i = 0.0  # cost constraint goes slack at this rate
                sol = inners[i].recover(b_try[i], d_i, sigma_target)
                if abs(sol["sigma"] - sigma_target) > 1e-6 * max(1.0, sigma_target):
                    ok = False
                    break
                sols_t[i] = (d_i, sol)
                needs_t[i] = sol["sigma"] / (1.0 + betas[i])
            if ok:
                return b_try, needs_t, sols_t, alloc_t, active_v
        return None

    result = attempt(b)
    if result is None:
        # degenerate duals (e.g. cost-capped clients on tight capacity):
        # take multipliers from a direct convex solve and reassemble
        try:
            result = attempt(_cvx_multipliers(model, prefs, u))
        except ImportError:
            result = None
    if result is None:
        raise NoConvergence(
            f"no allocation on the optimal face meets the expected-rate "
            f"targets (b={b}, needs={needs})")
    b_hat, needs, sols, alloc, active = result

    chi = []
    omega = []
    for peaks in model.peaks:
        top = max(b_hat[i] * peaks[i] for i in range(n)) if n else 0.0
        chi_c = top / tau
        chi.append(chi_c)
        omega.append([max(chi_c / peaks[i] - b_hat[i] / tau, 0.0) for i in range(n)])

    quality = []
    tradeoffs = []
    gamma = []
    gamma_bar = []
    m_stat, v_stat, sigma_stat, lam_stat, rho_stat = [], [], [], [], []
    d_mult = []
    value = 0.0
    for i in range(n):
        d_i, sol = sols[i]
        d_mult.append(d_i)
        quality.append({j: q for j, q in enumerate(sol["q"])})
        tradeoffs.append(inners[i].tradeoffs)
        g, gb = {}, {}
        for j, (tr, q) in enumerate(zip(inners[i].tradeoffs, sol["q"])):
            lo, hi = _stationarity_interval(tr, q, sol["amp"], sol["pull"],
                                            sol["m"], sol["kappa"], u)
            g[j] = max(0.0, -hi) if q <= tr.q_min + 1e-9 * tr.q_max else 0.0
            gb[j] = max(0.0, lo) if q >= tr.q_max * (1 - 1e-9) else 0.0
        gamma.append(g)
        gamma_bar.append(gb)
        m_stat.append(sol["m"])
        v_stat.append(sol["v"])
        sigma_stat.append(sol["sigma"])
        lam_stat.append(inners[i].mean_l)
        rho_stat.append(sum(p * alloc[a][i] for a, p in enumerate(model.constraint_probs)))
        value += sol["value"]

    dual = _dual_value(model, tau, b_hat, sols)
    return OptstatSolution(
        quality=quality, tradeoffs=tradeoffs, allocation=alloc,
        b_mult=b_hat, d_mult=d_mult, chi=chi, omega=omega,
        gamma=gamma, gamma_bar=gamma_bar, value=value,
        m_stat=m_stat, v_stat=v_stat, sigma_stat=sigma_stat,
        lam_stat=lam_stat, rho_stat=rho_stat,
        dual_value=dual, history=history,
    )


def _locate_sigma_cliff(inn: _ClientInner, b: float, d: float, rel: float):
    """Mean-rate range of the argmax set near b, recentering on the jump.

    The mean rate is non-increasing in the multiplier and jumps where the
    inner objective has a flat direction.  If a jump lies within the
    relative window, bisect onto it and return the two one-sided rates
    plus the recentered multiplier; otherwise return the (point) range.
    """
    window = max(abs(b) * rel, 1e-15)
    lo_b = max(b - window, 0.0)
    hi_b = b + window
    s_hi = inn.solve(lo_b, d)["sigma"]
    s_lo = inn.solve(hi_b, d)["sigma"]
    if s_hi - s_lo <= 1e-9 * max(1.0, s_hi):
        return (s_lo, s_hi), b
    mid_sigma = 0.5 * (s_hi + s_lo)
    for _ in range(100):
        mid = 0.5 * (lo_b + hi_b)
        if inn.solve(mid, d)["sigma"] >= mid_sigma:
            lo_b = mid
        else:
            hi_b = mid
    b_star = 0.5 * (lo_b + hi_b)
    db = max(abs(b_star) * 1e-12, 1e-18)
    hi_sol = inn.solve(max(b_star - db, 0.0), d)
    lo_sol = inn.solve(b_star + db, d)
    return (lo_sol["sigma"], hi_sol["sigma"]), b_star


def _solve_coordinate(model, inners, prefs, tau, b, i, cap) -> float:
    """Complementarity root in coordinate i with the others held fixed."""

    def excess(bi):
        bb = list(b)
        bb[i] = bi
        _d, sol = inners[i].solve_with_cost(bi)
        supply = _supply(model, bb)
        return sol["sigma"] / (1.0 + prefs[i].beta_bar) - supply[i] / tau

    if excess(0.0) <= 0.0:
        return 0.0
    lo, hi = 0.0, cap
    if excess(hi) > 0.0:
        return hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return hi


def _dual_value(model, tau, b, sols) -> float:
    total = sum(sol["inner"] for _d, sol in sols)
    total += sum(d for d, _sol in sols)
    total += _alloc_dual_value(model, b) / tau
    return total


def _primal_bound(model, prefs, u, inners, sols) -> float:
    """Feasible objective value obtained by shrinking qualities if needed."""
    qs = [list(sol["q"]) for _d, sol in sols]

    def needs_for(scale):
        out = []
        for i, inn in enumerate(inners):
            sigma = sum(
                w * eval_rate(tr, tr.q_min + scale * (q - tr.q_min))
                for w, tr, q in zip(inn.wl, inn.tradeoffs, qs[i]))
            out.append(sigma / (1.0 + prefs[i].beta_bar))
        return out

    if _max_supply_scale(model, needs_for(1.0)) >= 1.0:
        scale = 1.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if _max_supply_scale(model, needs_for(mid)) >= 1.0:
                lo = mid
            else:
                hi = mid
        scale = lo
    value = 0.0
    for i, inn in enumerate(inners):
        scaled = [tr.q_min + scale * (q - tr.q_min)
                  for tr, q in zip(inn.tradeoffs, qs[i])]
        mean_uq = sum(w * u.uq_value(q) for w, q in zip(inn.wl, scaled))
        mean_q = sum(w * q for w, q in zip(inn.wl, scaled))
        var = sum(w * (q - mean_q) ** 2 for w, q in zip(inn.wl, scaled))
        value += u.ue_value(mean_uq - u.uv_value(var))
    return value


def _stationarity_interval(tr: QrTradeoff, q: float, amp: float, pull: float,
                           m: float, kappa: float, u: UtilitySpec):
    base = amp * (u.uq_prime(q) - 2.0 * pull * (q - m))
    s_lo, s_hi = subgradient(tr, q)
    return base - kappa * s_hi, base - kappa * s_lo


# ---------------------------------------------------------------------------
# certificate


def verify_kkt_optstat(sol: OptstatSolution, model: StationaryModel,
                       prefs: list[OraclePrefs], u: UtilitySpec) -> dict:
    """Residuals of every stationarity and complementarity equation."""
    n = model.n
    tau = model.tau_slot
    report: dict[str, float] = {}

    q_res = comp_q = 0.0
    for i in range(n):
        inn = _ClientInner(model.clients[i], prefs[i], u)
        m_i = sol.m_stat[i]
        v_i = sol.v_stat[i]
        mu_i = sum(w * u.uq_value(sol.quality[i][j]) for j, w in enumerate(inn.wl))
        e = mu_i - u.uv_value(v_i)
        amp = u.ue_prime(e)
        pull = u.uv_prime(v_i)
        kappa = inn.kappa(sol.b_mult[i], sol.d_mult[i])
        for j, tr in enumerate(inn.tradeoffs):
            q = sol.quality[i][j]
            lo, hi = _stationarity_interval(tr, q, amp, pull, m_i, kappa, u)
            g = sol.gamma[i].get(j, 0.0)
            gb = sol.gamma_bar[i].get(j, 0.0)
            lo, hi = lo + g - gb, hi + g - gb
            norm = max(1.0, amp * (1.0 + 2.0 * pull * inn.q_top))
            q_res = max(q_res, max(0.0, lo, -hi) / norm)
            comp_q = max(comp_q, abs(g * (q - tr.q_min)) / max(1.0, tr.q_max),
                         abs(gb * (tr.q_max - q)) / max(1.0, tr.q_max))
    report["quality_stationarity"] = q_res
    report["quality_complementarity"] = comp_q

    r_res = comp_r = feas = 0.0
    for a_idx, peaks in enumerate(model.peaks):
        r = sol.allocation[a_idx]
        cval = sum(r[i] / peaks[i] for i in range(n)) - 1.0
        feas = max(feas, cval, max(model.r_min[i] - r[i] for i in range(n)))
        chi_c = sol.chi[a_idx]
        for i in range(n):
            st = -chi_c / peaks[i] + sol.b_mult[i] / tau + sol.omega[a_idx][i]
            norm = max(1.0, abs(chi_c / peaks[i]), abs(sol.b_mult[i]) / tau)
            r_res = max(r_res, abs(st) / norm)
            comp_r = max(comp_r, abs(sol.omega[a_idx][i] * (r[i] - model.r_min[i]))
                         / max(1.0, abs(sol.omega[a_idx][i]) * max(peaks)))
        comp_r = max(comp_r, abs(chi_c * cval) / max(1.0, chi_c))
    report["allocation_stationarity"] = r_res
    report["allocation_complementarity"] = comp_r
    report["primal_feasibility"] = max(feas, 0.0)

    cost_comp = rebuf_comp = cons = 0.0
    for i in range(n):
        p = prefs[i]
        sigma = sol.sigma_stat[i]
        rho = sol.rho_stat[i]
        if p.p_d > 0.0 and math.isfinite(p.p_bar):
            slack = 1.0 - p.p_d * sigma / p.p_bar
            cons = max(cons, -slack)
            cost_comp = max(cost_comp, abs(sol.d_mult[i] * slack)
                            / max(1.0, sol.d_mult[i]))
        balance = sigma / (1.0 + p.beta_bar) - rho / tau
        cons = max(cons, balance / max(1.0, abs(sigma)))
        rebuf_comp = max(rebuf_comp, abs(sol.b_mult[i] * balance)
                         / max(1.0, sol.b_mult[i] * max(1.0, abs(sigma))))
    report["cost_complementarity"] = cost_comp
    report["rebuffer_complementarity"] = rebuf_comp
    report["expectation_feasibility"] = max(cons, 0.0)

    report["max_residual"] = max(report.values())
    return report


# ---------------------------------------------------------------------------
# offline program on realized sequences


def solve_opt_s(constraint_peaks: list[tuple[float, ...]],
                client_segments: list[list[tuple[QrTradeoff, float]]],
                prefs: list[OraclePrefs], u: UtilitySpec,
                tau_slot: float = 0.01, r_min: tuple[float, ...] = (),
                max_variables: int = 5000) -> tuple[float, list[list[float]], OptstatSolution]:
    """Offline joint program on realized slot and segment sequences.

    Groups identical slots and identical (tradeoff, length) draws, solves
    the stationary program under the empirical distributions, and maps
    the per-group decisions back onto the sequences.  Returns the optimal
    objective, per-client quality sequences, and the grouped solution.
    """
    n = len(client_segments)
    raw = sum(len(s) for s in client_segments) + len(constraint_peaks) * n
    if raw > 50_000_000:
        raise TooLarge(f"{raw} raw sequence entries exceed the supported scale")

    c_keys: dict = {}
    c_counts: list[int] = []
    c_order = []
    for pk in constraint_peaks:
        key = tuple(pk)
        if key not in c_keys:
            c_keys[key] = len(c_counts)
            c_counts.append(0)
            c_order.append(key)
        c_counts[c_keys[key]] += 1
    total_k = len(constraint_peaks)
    peaks = tuple(c_order)
    c_probs = tuple(cnt / total_k for cnt in c_counts)

    clients = []
    seg_keys_per_client = []
    for segs in client_segments:
        keys: dict = {}
        counts: list[int] = []
        atoms_raw = []
        for tr, l in segs:
            key = (tr.qualities, tr.rates, l)
            if key not in keys:
                keys[key] = len(counts)
                counts.append(0)
                atoms_raw.append((tr, l))
            counts[keys[key]] += 1
        total_s = len(segs)
        atoms = tuple(
            FlAtom(tradeoff=tr, length=l, prob=cnt / total_s)
            for (tr, l), cnt in zip(atoms_raw, counts)
        )
        clients.append(ClientModel(atoms=atoms))
        seg_keys_per_client.append(keys)

    grouped = len(peaks) * n + sum(len(cm.atoms) for cm in clients)
    if grouped > max_variables:
        raise TooLarge(f"{grouped} grouped variables exceed the supported scale")
    model = StationaryModel(peaks=peaks, constraint_probs=c_probs,
                            clients=tuple(clients), tau_slot=tau_slot, r_min=r_min)
    sol = solve_optstat(model, prefs, u)

    quality_seqs = []
    for ci, segs in enumerate(client_segments):
        inn = _ClientInner(model.clients[ci], prefs[ci], u)
        seq = []
        for tr, _l in segs:
            seq.append(sol.quality_for(ci, tr))
        quality_seqs.append(seq)
    return sol.value, quality_seqs, sol


def brute_force_discrete(constraint_peaks: list[tuple[float, ...]],
                         client_segments: list[list[tuple[QrTradeoff, float, tuple[float, ...]]]],
                         prefs: list[OraclePrefs], u: UtilitySpec,
                         tau_slot: float = 0.01,
                         max_combos: int = 10_000_000) -> tuple[float, list[list[float]]]:
    """Exhaustive argmax over finite per-segment quality choices.

    Segments carry (tradeoff, length, choice tuple).  A joint assignment
    is feasible when every client meets its cost cap and the implied
    expected-rate demands admit a feasible slot allocation.  Intended for
    test-size instances only.
    """
    import itertools

    n = len(client_segments)
    combos = 1
    for segs in client_segments:
        for _tr, _l, choices in segs:
            combos *= max(len(choices), 1)
            if combos > max_combos:
                raise TooLarge(f"enumeration exceeds {max_combos} combinations")

    c_keys: dict = {}
    counts: list[int] = []
    order = []
    for pk in constraint_peaks:
        key = tuple(pk)
        if key not in c_keys:
            c_keys[key] = len(counts)
            counts.append(0)
            order.append(key)
        counts[c_keys[key]] += 1
    model = StationaryModel(
        peaks=tuple(order),
        constraint_probs=tuple(c / len(constraint_peaks) for c in counts),
        clients=tuple(ClientModel(atoms=(FlAtom(segs[0][0], segs[0][1], 1.0),))
                      for segs in client_segments),
        tau_slot=tau_slot,
    )

    per_client_options = []
    for segs in client_segments:
        per_client_options.append(list(itertools.product(
            *[choices for _tr, _l, choices in segs])))

    best_val = -math.inf
    best_assign = None
    for assign in itertools.product(*per_client_options):
        needs = []
        ok = True
        for i, qs in enumerate(assign):
            segs = client_segments[i]
            lens = [l for _tr, l, _c in segs]
            sizes = [eval_rate(tr, q) * l for (tr, l, _c), q in zip(segs, qs)]
            dur = sum(lens)
            sigma = sum(sizes) / dur
            p = prefs[i]
            if p.p_d > 0.0 and math.isfinite(p.p_bar):
                if p.p_d * sigma > p.p_bar * (1 + 1e-12):
                    ok = False
                    break
            needs.append(sigma / (1.0 + p.beta_bar))
        if not ok:
            continue
        if _max_supply_scale(model, needs) < 1.0 - 1e-9:
            continue
        value = 0.0
        for i, qs in enumerate(assign):
            segs = client_segments[i]
            lens = np.array([l for _tr, l, _c in segs])
            qarr = np.array(qs, dtype=float)
            mean_uq = float(np.dot(lens, [u.uq_value(q) for q in qs]) / lens.sum())
            mean_q = float(np.dot(lens, qarr) / lens.sum())
            var = float(np.dot(lens, (qarr - mean_q) ** 2) / lens.sum())
            value += u.ue_value(mean_uq - u.uv_value(var))
        if value > best_val:
            best_val = value
            best_assign = [list(qs) for qs in assign]
    if best_assign is None:
        raise InfeasibleModel("no feasible joint assignment")
    return best_val, best_assign
