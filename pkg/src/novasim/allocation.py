"""Per-slot resource allocation subproblems.

All solvers maximize a linear objective sum(w_i * r_i) over a convex slot
constraint with per-client floors.  The linear peak-rate form has a closed
form: floors first, then all residual capacity to a client maximizing
w_i * p_i (ties to the lowest client id).  A general convex form is solved
numerically and certified against the stationarity system

    w_i = chi * dc/dr_i - omega_i,   chi, omega >= 0,
    chi * c(r) = 0,                  omega_i * (r_i - r_min_i) = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize


class InfeasibleFloor(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


class EmptyFeasibleSet(ValueError):
    pass


@dataclass(frozen=True)
class LinearConstraint:
    """Peak-rate constraint sum(r_i / p_i) <= 1 with floors r >= r_min."""

    peaks: tuple[float, ...]  # bits per slot
    r_min: tuple[float, ...] = ()

    def __post_init__(self):
        if any(p <= 0 for p in self.peaks):
            raise ValueError("peaks must be positive")
        if not self.r_min:
            object.__setattr__(self, "r_min", tuple(0.0 for _ in self.peaks))
        elif len(self.r_min) != len(self.peaks):
            raise ValueError("r_min and peaks differ in length")

    @property
    def n(self) -> int:
        return len(self.peaks)

    def evaluate(self, r) -> float:
        return sum(ri / pi for ri, pi in zip(r, self.peaks)) - 1.0

    def gradient(self, r):
        return np.array([1.0 / p for p in self.peaks])


@dataclass(frozen=True)
class ConvexConstraint:
    """General convex constraint c(r) <= 0 given by evaluator and gradient."""

    evaluate: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    n: int
    r_min: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.r_min:
            object.__setattr__(self, "r_min", tuple(0.0 for _ in range(self.n)))
        elif len(self.r_min) != self.n:
            raise ValueError("r_min length mismatch")


SlotConstraint = LinearConstraint | ConvexConstraint


@dataclass(frozen=True)
class AllocationWeights:
    """Per-client objective weights, optionally with data-user marginals."""

    w: tuple[float, ...]
    data_weights: tuple[float, ...] = ()
    p_v: float = 1.0

    def __post_init__(self):
        if any(wi < 0 for wi in self.w):
            raise ValueError("weights must be non-negative")
        if self.p_v <= 0:
            raise ValueError("video priority must be positive")


@dataclass(frozen=True)
class SlotAllocation:
    r: tuple[float, ...]
    objective: float
    winner: int | None = None


def _as_weight_vector(w) -> list[float]:
    if isinstance(w, AllocationWeights):
        return list(w.w)
    return list(w)


def linear_winner(weights: Sequence[float], peaks: Sequence[float], r_min: Sequence[float]):
    """Closed-form optimum of the linear program: floors plus one winner.

    Returns (allocation list, objective, winner index).  Raises
    InfeasibleFloor when the floors alone exceed capacity.
    """
    used = 0.0
    for rm, p in zip(r_min, peaks):
        used += rm / p
    residual = 1.0 - used
    if residual < -1e-12:
        raise InfeasibleFloor(f"floors consume {used:.6g} > 1 of slot capacity")
    residual = max(residual, 0.0)
    best = 0
    best_metric = -1.0
    for i, (wi, p) in enumerate(zip(weights, peaks)):
        metric = wi * p
        if metric > best_metric + 1e-15 * max(1.0, abs(best_metric)):
            best_metric = metric
            best = i
    r = list(r_min)
    r[best] += residual * peaks[best]
    objective = sum(wi * ri for wi, ri in zip(weights, r))
    return r, objective, best


def solve_rnova_linear(w, c: LinearConstraint) -> SlotAllocation:
    weights = _as_weight_vector(w)
    r, obj, winner = linear_winner(weights, c.peaks, c.r_min)
    return SlotAllocation(r=tuple(r), objective=obj, winner=winner)


def solve_pf(rho: Sequence[float], c: LinearConstraint) -> SlotAllocation:
    """Proportional-fair slot allocation: weights are reciprocal mean rates."""
    if any(x <= 0 for x in rho):
        raise ValueError("mean-rate trackers must be positive")
    return solve_rnova_linear([1.0 / x for x in rho], c)


def solve_shared(
    w_video,
    rho_data: Sequence[float],
    udprime: Callable[[float], float] | None,
    p_v: float,
    c: LinearConstraint,
) -> SlotAllocation:
    """Joint video/data slot allocation.

    Video clients enter with weight p_v * w_i, data users with the marginal
    utility of their mean rate (proportional-fair 1/rho by default).  The
    constraint must cover the merged client list, video first.
    """
    video = _as_weight_vector(w_video)
    if udprime is None:
        udprime = lambda x: 1.0 / x
    merged = [p_v * wi for wi in video] + [udprime(x) for x in rho_data]
    if len(merged) != c.n:
        raise ValueError("constraint does not cover the merged client set")
    return solve_rnova_linear(merged, c)


def solve_rnova_discrete(w, feasible: Sequence[Sequence[float]]) -> SlotAllocation:
    """Argmax over an explicit finite set of permissible allocations."""
    if not feasible:
        raise EmptyFeasibleSet("no feasible allocations supplied")
    weights = _as_weight_vector(w)
    best = None
    best_val = -math.inf
    for idx, r in enumerate(feasible):
        val = sum(wi * ri for wi, ri in zip(weights, r))
        if val > best_val:
            best_val = val
            best = idx
    r = tuple(feasible[best])
    return SlotAllocation(r=r, objective=best_val, winner=best)


def solve_rnova_gc(w, subconstraints: Sequence[LinearConstraint]) -> SlotAllocation:
    """Multi-subresource allocation: per-subresource winner rule.

    Cumulative floors are covered greedily across sub-resources (falling
    back to a feasibility program when greedy packing fails), then each
    sub-resource's residual goes to its own best client.
    """
    weights = _as_weight_vector(w)
    n = len(weights)
    floors = [0.0] * n
    for sub in subconstraints:
        if sub.n != n:
            raise ValueError("sub-constraint client count mismatch")
        for i, rm in enumerate(sub.r_min):
            floors[i] = max(floors[i], rm)

    x = [[0.0] * len(subconstraints) for _ in range(n)]  # floor split
    cap = [1.0] * len(subconstraints)
    for i in range(n):
        need = floors[i]
        for widx, sub in enumerate(subconstraints):
            if need <= 1e-15:
                break
            avail = cap[widx] * sub.peaks[i]
            take = min(need, avail)
            if take > 0:
                x[i][widx] += take
                cap[widx] -= take / sub.peaks[i]
                need -= take
        if need > 1e-9 * max(1.0, floors[i]):
            if not _floor_split_lp(floors, subconstraints, x, cap):
                raise InfeasibleFloor("floors cannot be met by any sub-resource split")
            break

    r = [sum(x[i]) for i in range(n)]
    for widx, sub in enumerate(subconstraints):
        best = 0
        best_metric = -1.0
        for i in range(n):
            metric = weights[i] * sub.peaks[i]
            if metric > best_metric + 1e-15 * max(1.0, abs(best_metric)):
                best_metric = metric
                best = i
        r[best] += max(cap[widx], 0.0) * sub.peaks[best]
    objective = sum(wi * ri for wi, ri in zip(weights, r))
    return SlotAllocation(r=tuple(r), objective=objective)


def _floor_split_lp(floors, subconstraints, x, cap) -> bool:
    """Exact floor-packing feasibility via linear programming."""
    from scipy.optimize import linprog

    n = len(floors)
    m = len(subconstraints)
    # variables x[i][w] >= 0; sum_w x[i][w] = floors[i]; sum_i x[i][w]/p <= 1
    a_eq = np.zeros((n, n * m))
    b_eq = np.array(floors, dtype=float)
    a_ub = np.zeros((m, n * m))
    for i in range(n):
        for widx in range(m):
            a_eq[i, i * m + widx] = 1.0
            a_ub[widx, i * m + widx] = 1.0 / subconstraints[widx].peaks[i]
    res = linprog(
        np.zeros(n * m), A_ub=a_ub, b_ub=np.ones(m), A_eq=a_eq, b_eq=b_eq,
        bounds=[(0.0, None)] * (n * m), method="highs",
    )
    if not res.success:
        return False
    for i in range(n):
        for widx in range(m):
            x[i][widx] = res.x[i * m + widx]
    for widx in range(m):
        cap[widx] = 1.0 - sum(x[i][widx] / subconstraints[widx].peaks[i] for i in range(n))
    return True


def kkt_residual_rnova(r, w, c: SlotConstraint) -> float:
    """Normalized violation of the allocation stationarity system at r."""
    weights = np.asarray(_as_weight_vector(w), dtype=float)
    rv = np.asarray(r, dtype=float)
    r_min = np.asarray(c.r_min, dtype=float)
    if isinstance(c, LinearConstraint):
        grad = c.gradient(rv)
        c_val = c.evaluate(rv)
    else:
        grad = np.asarray(c.gradient(rv), dtype=float)
        c_val = float(c.evaluate(rv))

    scale_r = max(1.0, float(np.max(np.abs(rv))), float(np.max(np.abs(r_min))))
    active = rv - r_min <= 1e-6 * scale_r
    feas = max(0.0, c_val, float(np.max(r_min - rv)) / scale_r)

    if c_val < -1e-9:
        chi = 0.0
    else:
        free = ~active
        if np.any(free):
            denom = float(np.dot(grad[free], grad[free]))
            chi = float(np.dot(weights[free], grad[free])) / denom if denom > 0 else 0.0
        else:
            with np.errstate(divide="ignore"):
                ratios = np.where(grad > 0, weights / np.where(grad > 0, grad, 1.0), 0.0)
            chi = float(np.max(ratios)) if ratios.size else 0.0
        chi = max(chi, 0.0)

    omega = np.where(active, np.maximum(chi * grad - weights, 0.0), 0.0)
    stationarity = np.abs(weights - chi * grad + omega)
    norm = max(1.0, float(np.max(np.abs(weights))), abs(chi) * float(np.max(np.abs(grad))))
    comp_c = abs(chi * c_val) / norm if c_val < 0 else 0.0
    return max(float(np.max(stationarity)) / norm, feas, comp_c)


TAU_KKT = 1e-7


def solve_rnova_convex(w, c: ConvexConstraint, max_iter: int = 10_000) -> SlotAllocation:
    """General convex slot allocation, certified to the stationarity system.

    A sequential quadratic step solves the smooth program from the floor
    point; floors are snapped exactly and tiny constraint overshoot is
    pulled back along the ray from the floors.  The certified residual
    must come in under TAU_KKT or the solve is rejected.
    """
    weights = np.asarray(_as_weight_vector(w), dtype=float)
    r_min = np.asarray(c.r_min, dtype=float)
    if c.evaluate(r_min) >= 0.0:
        raise InfeasibleFloor("floor point is not strictly feasible")

    if float(np.max(weights)) <= 0.0:
        return SlotAllocation(r=tuple(r_min), objective=0.0)

    cons = [{
        "type": "ineq",
        "fun": lambda r: -float(c.evaluate(r)),
        "jac": lambda r: -np.asarray(c.gradient(r), dtype=float),
    }]
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(
            lambda r: -float(np.dot(weights, r)),
            x0=r_min + 1e-9,
            jac=lambda r: -weights,
            bounds=[(rm, None) for rm in r_min],
            constraints=cons,
            method="SLSQP",
            options={"maxiter": min(max_iter, 1000), "ftol": 1e-14},
        )
    r = np.maximum(np.asarray(res.x, dtype=float), r_min)
    scale_r = max(1.0, float(np.max(np.abs(r))))
    r[r - r_min <= 1e-9 * scale_r] = r_min[r - r_min <= 1e-9 * scale_r]
    r = _restore_feasibility(r, r_min, c)
    residual = kkt_residual_rnova(r, weights, c)
    if residual > TAU_KKT:
        r = _projected_ascent_polish(r, weights, r_min, c, max_iter)
        residual = kkt_residual_rnova(r, weights, c)
    if residual > TAU_KKT:
        raise NoConvergence(f"allocation stationarity residual {residual:.3e} above {TAU_KKT}")
    return SlotAllocation(r=tuple(float(x) for x in r), objective=float(np.dot(weights, r)))


def _restore_feasibility(r, r_min, c: ConvexConstraint, margin: float = 0.0):
    if float(c.evaluate(r)) <= margin:
        return r
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(c.evaluate(r_min + mid * (r - r_min))) <= margin:
            lo = mid
        else:
            hi = mid
    return r_min + lo * (r - r_min)


def _projected_ascent_polish(r, weights, r_min, c: ConvexConstraint, max_iter: int):
    """Backtracking ascent along the objective with radial feasibility pullback."""
    best = r.copy()
    best_obj = float(np.dot(weights, best))
    step = max(1.0, float(np.max(np.abs(r)))) * 0.1
    for _ in range(max_iter):
        cand = np.maximum(best + step * weights / max(np.linalg.norm(weights), 1e-30), r_min)
        cand = _restore_feasibility(cand, r_min, c)
        obj = float(np.dot(weights, cand))
        if obj > best_obj + 1e-15:
            best, best_obj = cand, obj
            step *= 1.2
        else:
            step *= 0.5
            if step < 1e-14 * max(1.0, float(np.max(np.abs(best)))):
                break
    return best
