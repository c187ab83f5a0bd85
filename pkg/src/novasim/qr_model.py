"""Video model: segments with convex quality-rate tradeoffs.

A tradeoff is a finite list of (quality, compression rate) knots whose
piecewise-linear extension is convex and increasing.  Qualities are
dimensionless scores (typically on a 0..100 scale), rates are bits per
second.  The zero-quality rate is the metadata/overhead floor and must be
strictly positive.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field


class QualityOutOfRange(ValueError):
    """Quality query outside the tradeoff's knot span."""


@dataclass(frozen=True)
class QrTradeoff:
    """Convex increasing quality -> rate map, piecewise-linear through knots."""

    qualities: tuple[float, ...]
    rates: tuple[float, ...]  # bits/s, strictly increasing

    def __post_init__(self):
        problems = validate_knots(self.qualities, self.rates)
        if problems:
            raise ValueError("invalid tradeoff: " + "; ".join(problems))

    @property
    def q_max(self) -> float:
        return self.qualities[-1]

    @property
    def q_min(self) -> float:
        return self.qualities[0]

    @property
    def rate_floor(self) -> float:
        return self.rates[0]

    @property
    def rate_cap(self) -> float:
        return self.rates[-1]


def validate_knots(qualities, rates) -> list[str]:
    """Diagnostic check of the structural assumptions on a knot list.

    Returns a list of human-readable violations (empty when valid):
    strict monotonicity of qualities and rates, convexity of the
    piecewise-linear extension (non-decreasing slopes) and a strictly
    positive rate at the lowest quality.
    """
    problems = []
    if len(qualities) != len(rates):
        return ["qualities and rates differ in length"]
    if len(qualities) == 0:
        return ["empty knot list"]
    if rates[0] <= 0.0:
        problems.append(f"rate at lowest quality must be positive, got {rates[0]}")
    for j in range(1, len(qualities)):
        if not qualities[j] > qualities[j - 1]:
            problems.append(f"qualities not strictly increasing at knot {j}")
        if not rates[j] > rates[j - 1]:
            problems.append(f"rates not strictly increasing at knot {j}")
    slopes = []
    for j in range(1, len(qualities)):
        dq = qualities[j] - qualities[j - 1]
        if dq <= 0:
            continue
        slopes.append((rates[j] - rates[j - 1]) / dq)
    for j in range(1, len(slopes)):
        if slopes[j] < slopes[j - 1] * (1.0 - 1e-12):
            problems.append(
                f"convexity violated between pieces {j - 1} and {j}: "
                f"slope {slopes[j]:.6g} < {slopes[j - 1]:.6g}"
            )
    return problems


def validate_tradeoff(t: QrTradeoff) -> list[str]:
    """Re-run the structural diagnostics on a constructed tradeoff."""
    return validate_knots(t.qualities, t.rates)


def _check_range(t: QrTradeoff, q: float) -> None:
    if q < t.qualities[0] - 1e-12 or q > t.qualities[-1] + 1e-12:
        raise QualityOutOfRange(
            f"quality {q} outside tradeoff span [{t.qualities[0]}, {t.qualities[-1]}]"
        )


def eval_rate(t: QrTradeoff, q: float) -> float:
    """Rate (bits/s) needed for quality q; exact at knots, linear between."""
    _check_range(t, q)
    qs = t.qualities
    j = bisect.bisect_right(qs, q)
    if j >= len(qs):
        return t.rates[-1]
    if j == 0:
        return t.rates[0]
    if q == qs[j - 1]:
        return t.rates[j - 1]
    frac = (q - qs[j - 1]) / (qs[j] - qs[j - 1])
    return t.rates[j - 1] + frac * (t.rates[j] - t.rates[j - 1])


def eval_rate_derivative(t: QrTradeoff, q: float) -> float:
    """Right-derivative of the piecewise-linear extension (left at q_max)."""
    _check_range(t, q)
    lo, hi = subgradient(t, q)
    return hi if q >= t.qualities[-1] - 1e-15 else (lo if q <= t.qualities[0] else _right_slope(t, q))


def _right_slope(t: QrTradeoff, q: float) -> float:
    qs = t.qualities
    j = bisect.bisect_right(qs, q)
    if j >= len(qs):
        j = len(qs) - 1
    return (t.rates[j] - t.rates[j - 1]) / (qs[j] - qs[j - 1])


def subgradient(t: QrTradeoff, q: float) -> tuple[float, float]:
    """Subgradient interval [left-slope, right-slope] of the rate map at q.

    At a knot the interval spans the two adjacent piece slopes; inside a
    piece it degenerates to that piece's slope.  One-sided convention at
    the endpoints of the span.
    """
    _check_range(t, q)
    qs, rs = t.qualities, t.rates
    n = len(qs)
    if n == 1:
        return (0.0, 0.0)

    def slope(j):  # slope of piece j, between knots j and j+1
        return (rs[j + 1] - rs[j]) / (qs[j + 1] - qs[j])

    if q <= qs[0]:
        s = slope(0)
        return (s, s)
    if q >= qs[-1]:
        s = slope(n - 2)
        return (s, s)
    j = bisect.bisect_left(qs, q)
    if j < n and qs[j] == q:
        # interior knot
        return (slope(j - 1), slope(j))
    return (slope(j - 1), slope(j - 1))


@dataclass(frozen=True)
class Segment:
    """One video segment: duration, tradeoff and its finite quality choices."""

    index: int
    length: float  # seconds
    tradeoff: QrTradeoff
    finite_qualities: tuple[float, ...] = ()

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"segment {self.index}: length must be positive")
        knot_set = set(self.tradeoff.qualities)
        for q in self.finite_qualities:
            if q not in knot_set:
                raise ValueError(
                    f"segment {self.index}: finite quality {q} is not a tradeoff knot"
                )

    def size_bits(self, q: float) -> float:
        return self.length * eval_rate(self.tradeoff, q)


@dataclass
class VideoTrace:
    """Ordered segment sequence for one client; indices contiguous from 1."""

    client_id: int
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        if not self.segments:
            raise ValueError("video trace must contain at least one segment")
        for pos, seg in enumerate(self.segments, start=1):
            if seg.index != pos:
                raise ValueError(f"segment indices must be contiguous from 1, got {seg.index} at {pos}")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def q_max(self) -> float:
        return max(s.tradeoff.q_max for s in self.segments)

    @property
    def l_min(self) -> float:
        return min(s.length for s in self.segments)

    @property
    def l_max(self) -> float:
        return max(s.length for s in self.segments)

    def segment(self, index: int, loop: bool = True) -> Segment:
        n = len(self.segments)
        if index <= n:
            return self.segments[index - 1]
        if not loop:
            raise IndexError(f"segment {index} beyond trace of length {n}")
        return self.segments[(index - 1) % n]


def traces_to_json(traces: list[VideoTrace]) -> str:
    doc = {
        "clients": [
            {
                "id": t.client_id,
                "segments": [
                    {
                        "l_seconds": s.length,
                        "knots": [[q, r] for q, r in zip(s.tradeoff.qualities, s.tradeoff.rates)],
                        "available_q": list(s.finite_qualities),
                    }
                    for s in t.segments
                ],
            }
            for t in traces
        ]
    }
    return json.dumps(doc, sort_keys=True)


def traces_from_json(text: str) -> list[VideoTrace]:
    doc = json.loads(text)
    traces = []
    for entry in doc["clients"]:
        segments = []
        for i, seg in enumerate(entry["segments"], start=1):
            knots = seg["knots"]
            tr = QrTradeoff(
                qualities=tuple(float(k[0]) for k in knots),
                rates=tuple(float(k[1]) for k in knots),
            )
            segments.append(
                Segment(
                    index=i,
                    length=float(seg["l_seconds"]),
                    tradeoff=tr,
                    finite_qualities=tuple(float(q) for q in seg.get("available_q", ())),
                )
            )
        traces.append(VideoTrace(client_id=int(entry["id"]), segments=segments))
    return traces
