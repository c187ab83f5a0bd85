import json

import pytest
from hypothesis import given, settings, strategies as st

from novasim.qr_model import (
    QrTradeoff,
    QualityOutOfRange,
    Segment,
    VideoTrace,
    eval_rate,
    eval_rate_derivative,
    subgradient,
    traces_from_json,
    traces_to_json,
    validate_knots,
    validate_tradeoff,
)


def two_knot():
    return QrTradeoff(qualities=(0.0, 100.0), rates=(0.1e6, 1.5e6))


def three_knot():
    return QrTradeoff(qualities=(0.0, 40.0, 100.0), rates=(0.1e6, 0.2e6, 1.5e6))


class TestEvalRate:
    def test_knot_identity(self):
        assert eval_rate(two_knot(), 0.0) == 0.1e6

    def test_midpoint_interpolation(self):
        # (0.1e6 + 1.5e6)/2
        assert eval_rate(two_knot(), 50.0) == pytest.approx(0.8e6)

    def test_second_piece(self):
        # 0.2e6 + (30/60)*1.3e6
        assert eval_rate(three_knot(), 70.0) == pytest.approx(0.85e6)

    def test_all_knots_bit_exact(self):
        t = three_knot()
        for q, r in zip(t.qualities, t.rates):
            assert eval_rate(t, q) == r

    def test_out_of_range(self):
        t = QrTradeoff(qualities=(10.0, 100.0), rates=(0.1e6, 1.5e6))
        with pytest.raises(QualityOutOfRange):
            eval_rate(t, 5.0)
        with pytest.raises(QualityOutOfRange):
            eval_rate(two_knot(), 101.0)


class TestDerivative:
    def test_single_piece_slope(self):
        assert eval_rate_derivative(two_knot(), 50.0) == pytest.approx(14000.0)

    def test_first_piece_slope(self):
        assert eval_rate_derivative(three_knot(), 10.0) == pytest.approx(2500.0)

    def test_qmax_equals_interior_on_single_piece(self):
        t = two_knot()
        assert eval_rate_derivative(t, 100.0) == eval_rate_derivative(t, 50.0)

    def test_subgradient_interval_at_knot(self):
        t = three_knot()
        lo, hi = subgradient(t, 40.0)
        assert lo == pytest.approx(2500.0)
        assert hi == pytest.approx((1.5e6 - 0.2e6) / 60.0)


class TestValidate:
    def test_valid(self):
        assert validate_knots((0, 50, 100), (0.1e6, 0.5e6, 1.5e6)) == []

    def test_convexity_violation(self):
        problems = validate_knots((0, 50, 100), (0.1e6, 1.0e6, 1.5e6))
        assert any("convexity" in p for p in problems)

    def test_zero_overhead_forbidden(self):
        problems = validate_knots((0,), (0.0,))
        assert any("positive" in p for p in problems)

    def test_validate_tradeoff_on_instance(self):
        assert validate_tradeoff(three_knot()) == []


@st.composite
def tradeoffs(draw):
    n_pieces = draw(st.integers(min_value=1, max_value=5))
    gaps = draw(st.lists(st.floats(0.5, 30.0), min_size=n_pieces, max_size=n_pieces))
    qs = [0.0]
    for g in gaps:
        qs.append(qs[-1] + g)
    base = draw(st.floats(1e4, 1e5))
    # non-decreasing slope increments keep the extension convex
    slopes = []
    s = draw(st.floats(10.0, 1e3))
    for _ in range(n_pieces):
        s += draw(st.floats(0.0, 1e3))
        slopes.append(s)
    rates = [base]
    for j in range(n_pieces):
        rates.append(rates[-1] + slopes[j] * (qs[j + 1] - qs[j]))
    return QrTradeoff(qualities=tuple(qs), rates=tuple(rates))


class TestProperties:
    @given(tradeoffs(), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_monotone(self, t, u1, u2):
        span = t.q_max - t.q_min
        q1, q2 = sorted((t.q_min + u1 * span, t.q_min + u2 * span))
        if q2 - q1 < 1e-9:
            return
        assert eval_rate(t, q1) < eval_rate(t, q2)
        assert eval_rate_derivative(t, q1) <= eval_rate_derivative(t, q2) + 1e-9

    @given(tradeoffs(), st.floats(0.0, 1.0), st.floats(0.0, 1.0),
           st.floats(0.0, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_convexity_on_random_triples(self, t, u1, u2, alpha):
        span = t.q_max - t.q_min
        q1 = t.q_min + u1 * span
        q2 = t.q_min + u2 * span
        qm = alpha * q1 + (1 - alpha) * q2
        lhs = eval_rate(t, qm)
        rhs = alpha * eval_rate(t, q1) + (1 - alpha) * eval_rate(t, q2)
        assert lhs <= rhs + 1e-6 * abs(rhs)


class TestSegmentsAndTraces:
    def test_segment_size(self):
        seg = Segment(index=1, length=2.0, tradeoff=two_knot())
        assert seg.size_bits(50.0) == pytest.approx(1.6e6)

    def test_finite_qualities_must_be_knots(self):
        with pytest.raises(ValueError):
            Segment(index=1, length=1.0, tradeoff=two_knot(), finite_qualities=(17.0,))

    def test_trace_indices_contiguous(self):
        segs = [Segment(index=2, length=1.0, tradeoff=two_knot())]
        with pytest.raises(ValueError):
            VideoTrace(client_id=0, segments=segs)

    def test_trace_looping(self):
        segs = [Segment(index=i, length=1.0, tradeoff=two_knot()) for i in (1, 2)]
        tr = VideoTrace(client_id=0, segments=segs)
        assert tr.segment(3).index == 1
        with pytest.raises(IndexError):
            tr.segment(3, loop=False)

    def test_json_roundtrip(self):
        segs = [
            Segment(index=1, length=1.0, tradeoff=three_knot(),
                    finite_qualities=(0.0, 40.0, 100.0)),
            Segment(index=2, length=0.5, tradeoff=two_knot()),
        ]
        traces = [VideoTrace(client_id=3, segments=segs)]
        text = traces_to_json(traces)
        back = traces_from_json(text)
        assert back[0].client_id == 3
        assert back[0].segments[0].tradeoff.rates == three_knot().rates
        assert back[0].segments[0].finite_qualities == (0.0, 40.0, 100.0)
        assert back[0].segments[1].length == 0.5
        # deterministic serialization
        assert traces_to_json(back) == text
        json.loads(text)
