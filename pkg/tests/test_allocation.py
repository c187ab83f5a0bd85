import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from novasim.allocation import (
    AllocationWeights,
    ConvexConstraint,
    EmptyFeasibleSet,
    InfeasibleFloor,
    LinearConstraint,
    kkt_residual_rnova,
    solve_pf,
    solve_rnova_convex,
    solve_rnova_discrete,
    solve_rnova_gc,
    solve_rnova_linear,
    solve_shared,
)


def brute_force_linear(weights, peaks, r_min):
    """Independent oracle: enumerate the vertices 'floors + residual to j'."""
    used = sum(rm / p for rm, p in zip(r_min, peaks))
    residual = 1.0 - used
    assert residual >= -1e-12
    best = None
    for j in range(len(peaks)):
        r = list(r_min)
        r[j] += max(residual, 0.0) * peaks[j]
        val = sum(w * x for w, x in zip(weights, r))
        if best is None or val > best[0] + 1e-15:
            best = (val, r)
    return best


class TestLinear:
    def test_basic_winner(self):
        a = solve_rnova_linear((1.0, 2.0), LinearConstraint(peaks=(10.0, 4.0)))
        assert a.r == (10.0, 0.0)
        assert a.objective == pytest.approx(10.0)

    def test_zero_weights_tiebreak_to_first(self):
        c = LinearConstraint(peaks=(8.0, 8.0), r_min=(1.0, 1.0))
        a = solve_rnova_linear((0.0, 0.0), c)
        assert a.winner == 0
        assert a.r[1] == 1.0
        assert a.r[0] > 1.0

    def test_three_client_winner(self):
        c = LinearConstraint(peaks=(5.0, 10.0, 2.0), r_min=(0.1, 0.1, 0.1))
        a = solve_rnova_linear((1.0, 1.0, 1.0), c)
        assert a.winner == 1
        bf_val, bf_r = brute_force_linear((1, 1, 1), c.peaks, c.r_min)
        assert a.objective == pytest.approx(bf_val)
        assert a.r == pytest.approx(tuple(bf_r))

    def test_infeasible_floor(self):
        with pytest.raises(InfeasibleFloor):
            solve_rnova_linear((1.0,), LinearConstraint(peaks=(2.0,), r_min=(3.0,)))

    def test_accepts_allocation_weights(self):
        w = AllocationWeights(w=(1.0, 2.0))
        a = solve_rnova_linear(w, LinearConstraint(peaks=(10.0, 4.0)))
        assert a.r == (10.0, 0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_brute_force_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        peaks = tuple(rng.uniform(1.0, 20.0, n))
        weights = tuple(rng.uniform(0.0, 5.0, n))
        r_min = tuple(rng.uniform(0.0, 0.15) * p for p in peaks)
        c = LinearConstraint(peaks=peaks, r_min=r_min)
        a = solve_rnova_linear(weights, c)
        bf_val, _ = brute_force_linear(weights, peaks, r_min)
        assert abs(a.objective - bf_val) <= 1e-9 * max(1.0, abs(bf_val))
        # feasibility is exact
        assert c.evaluate(a.r) <= 1e-9
        assert all(ri >= rm for ri, rm in zip(a.r, r_min))

    @given(st.floats(0.1, 100.0))
    @settings(max_examples=50, deadline=None)
    def test_weight_scaling_invariance(self, lam):
        c = LinearConstraint(peaks=(5.0, 10.0, 2.0), r_min=(0.1, 0.2, 0.0))
        base = solve_rnova_linear((1.0, 0.4, 3.0), c)
        scaled = solve_rnova_linear((lam, 0.4 * lam, 3.0 * lam), c)
        assert scaled.r == base.r

    @pytest.mark.parametrize("seed", range(10))
    def test_monotone_in_weight(self, seed):
        rng = np.random.default_rng(300 + seed)
        peaks = tuple(rng.uniform(1, 20, 3))
        w = list(rng.uniform(0, 5, 3))
        c = LinearConstraint(peaks=peaks)
        before = solve_rnova_linear(tuple(w), c).objective
        w[1] += rng.uniform(0.1, 2.0)
        after = solve_rnova_linear(tuple(w), c).objective
        assert after >= before - 1e-12


class TestPf:
    def test_examples(self):
        c = LinearConstraint(peaks=(10.0, 4.0))
        assert solve_pf((1.0, 1.0), c).winner == 0
        assert solve_pf((10.0, 1.0), c).winner == 1

    def test_equal_metric_lowest_id(self):
        c = LinearConstraint(peaks=(4.0, 4.0))
        assert solve_pf((1.0, 1.0), c).winner == 0

    def test_requires_positive_rho(self):
        with pytest.raises(ValueError):
            solve_pf((0.0, 1.0), LinearConstraint(peaks=(1.0, 1.0)))


class TestShared:
    def test_video_wins_with_priority(self):
        c = LinearConstraint(peaks=(10.0, 10.0))
        a = solve_shared((1.0,), (5.0,), None, 2.0, c)
        # metrics: 2*1*10 = 20 vs (1/5)*10 = 2
        assert a.r == (10.0, 0.0)

    def test_tiny_priority_data_wins(self):
        c = LinearConstraint(peaks=(10.0, 10.0))
        a = solve_shared((1.0,), (5.0,), None, 1e-9, c)
        assert a.r == (0.0, 10.0)

    def test_two_data_users_pf_rule(self):
        c = LinearConstraint(peaks=(4.0, 4.0))
        a = solve_shared((), (1.0, 4.0), None, 1.0, c)
        assert a.r == (4.0, 0.0)


class TestDiscrete:
    def test_enumeration(self):
        a = solve_rnova_discrete((1.0, 2.0), [(10.0, 0.0), (0.0, 4.0)])
        assert a.r == (10.0, 0.0)  # 10 > 8

    def test_singleton(self):
        a = solve_rnova_discrete((1.0,), [(3.0,)])
        assert a.r == (3.0,)

    def test_tie_first_in_list(self):
        a = solve_rnova_discrete((1.0, 1.0), [(2.0, 3.0), (3.0, 2.0)])
        assert a.r == (2.0, 3.0)

    def test_empty(self):
        with pytest.raises(EmptyFeasibleSet):
            solve_rnova_discrete((1.0,), [])


class TestGc:
    def test_two_subresources(self):
        s1 = LinearConstraint(peaks=(10.0, 4.0))
        s2 = LinearConstraint(peaks=(2.0, 8.0))
        a = solve_rnova_gc((1.0, 2.0), [s1, s2])
        assert a.r == (10.0, 8.0)

    def test_single_subresource_reduces_to_linear(self):
        c = LinearConstraint(peaks=(5.0, 10.0, 2.0), r_min=(0.1, 0.1, 0.1))
        a = solve_rnova_gc((1.0, 1.0, 1.0), [c])
        b = solve_rnova_linear((1.0, 1.0, 1.0), c)
        assert a.r == pytest.approx(b.r)

    def test_zero_weights(self):
        s1 = LinearConstraint(peaks=(10.0, 4.0), r_min=(0.5, 0.5))
        a = solve_rnova_gc((0.0, 0.0), [s1])
        assert a.r[1] == pytest.approx(0.5)

    def test_floor_split_across_subresources(self):
        # each sub-resource alone cannot carry the floors, together they can
        s1 = LinearConstraint(peaks=(1.0, 1.0), r_min=(0.8, 0.8))
        s2 = LinearConstraint(peaks=(1.0, 1.0), r_min=(0.8, 0.8))
        a = solve_rnova_gc((1.0, 0.5), [s1, s2])
        assert a.r[0] >= 0.8 - 1e-9 and a.r[1] >= 0.8 - 1e-9

    def test_infeasible_floor(self):
        s1 = LinearConstraint(peaks=(1.0, 1.0), r_min=(0.8, 0.8))
        with pytest.raises(InfeasibleFloor):
            solve_rnova_gc((1.0, 1.0), [s1])


def circle_constraint(n=2, radius=1.0, r_min=(0.0, 0.0)):
    return ConvexConstraint(
        evaluate=lambda r: float(sum(x * x for x in r) - radius ** 2),
        gradient=lambda r: 2.0 * np.asarray(r, dtype=float),
        n=n, r_min=r_min,
    )


class TestConvex:
    def test_symmetric_circle(self):
        a = solve_rnova_convex((1.0, 1.0), circle_constraint())
        assert a.r[0] == pytest.approx(np.sqrt(0.5), abs=1e-6)
        assert a.r[1] == pytest.approx(np.sqrt(0.5), abs=1e-6)

    def test_circle_grid_brute_force(self):
        w = (2.0, 1.0)
        a = solve_rnova_convex(w, circle_constraint())
        # independent oracle: polar grid at step 1e-3 radians
        th = np.arange(0.0, np.pi / 2, 1e-3)
        vals = w[0] * np.cos(th) + w[1] * np.sin(th)
        assert a.objective >= vals.max() - 1e-4

    def test_interval(self):
        c = ConvexConstraint(evaluate=lambda r: float(r[0] - 5.0),
                             gradient=lambda r: np.array([1.0]),
                             n=1, r_min=(0.1,))
        a = solve_rnova_convex((1.0,), c)
        assert a.r[0] == pytest.approx(5.0, abs=1e-8)

    def test_infeasible_floor(self):
        c = ConvexConstraint(evaluate=lambda r: float(r[0] - 5.0),
                             gradient=lambda r: np.array([1.0]),
                             n=1, r_min=(6.0,))
        with pytest.raises(InfeasibleFloor):
            solve_rnova_convex((1.0,), c)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_linear_solver_on_wrapped_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        peaks = rng.uniform(1.0, 20.0, n)
        weights = tuple(rng.uniform(0.05, 5.0, n))
        r_min = tuple(rng.uniform(0.0, 0.1) * peaks)
        lc = LinearConstraint(peaks=tuple(peaks), r_min=r_min)
        wrapped = ConvexConstraint(
            evaluate=lambda r, p=peaks: float(np.sum(np.asarray(r) / p) - 1.0),
            gradient=lambda r, p=peaks: 1.0 / p,
            n=n, r_min=r_min,
        )
        la = solve_rnova_linear(weights, lc)
        ca = solve_rnova_convex(weights, wrapped)
        assert abs(ca.objective - la.objective) <= 1e-6 * max(1.0, abs(la.objective))
        assert kkt_residual_rnova(ca.r, weights, wrapped) <= 1e-7

    @pytest.mark.parametrize("seed", range(10))
    def test_random_smooth_instances_certified(self, seed):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(2, 5))
        a = rng.uniform(0.5, 3.0, n)  # ellipsoid semi-axes
        c = ConvexConstraint(
            evaluate=lambda r, a=a: float(np.sum((np.asarray(r) / a) ** 2) - 1.0),
            gradient=lambda r, a=a: 2.0 * np.asarray(r) / a ** 2,
            n=n, r_min=tuple(rng.uniform(0.0, 0.05, n)),
        )
        w = tuple(rng.uniform(0.1, 2.0, n))
        sol = solve_rnova_convex(w, c)
        assert kkt_residual_rnova(sol.r, w, c) <= 1e-7
        assert c.evaluate(np.asarray(sol.r)) <= 1e-9


class TestKktResidual:
    def test_vertex_solution_is_stationary(self):
        c = LinearConstraint(peaks=(10.0, 4.0), r_min=(0.1, 0.1))
        a = solve_rnova_linear((1.0, 2.0), c)
        assert kkt_residual_rnova(a.r, (1.0, 2.0), c) <= 1e-12

    def test_interior_point_flagged(self):
        c = LinearConstraint(peaks=(10.0, 4.0))
        assert kkt_residual_rnova((1.0, 1.0), (1.0, 2.0), c) > 1e-3
