"""Evaluation quantities for quality series and download timelines.

Quality statistics are length-weighted with population normalization.
The rebuffering estimate compares cumulative segment size against the
time-average allocation; the realized figure is the ratio of stall time
to played time from the playback clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class EmptySeries(ValueError):
    pass


class ZeroAllocation(ValueError):
    pass


@dataclass(frozen=True)
class QualitySeries:
    """Per-segment (quality, length-seconds) pairs for one client."""

    qualities: tuple[float, ...]
    lengths: tuple[float, ...]
    client_id: int = 0

    def __post_init__(self):
        if len(self.qualities) != len(self.lengths):
            raise ValueError("qualities and lengths differ in length")
        if any(l <= 0 for l in self.lengths):
            raise ValueError("segment lengths must be positive")

    def __len__(self):
        return len(self.qualities)


def _arrays(series: QualitySeries):
    if len(series) == 0:
        raise EmptySeries("empty quality series")
    return np.asarray(series.qualities, dtype=float), np.asarray(series.lengths, dtype=float)


def mean_quality(series: QualitySeries) -> float:
    q, l = _arrays(series)
    return float(np.dot(l, q) / l.sum())


def var_quality(series: QualitySeries) -> float:
    q, l = _arrays(series)
    m = np.dot(l, q) / l.sum()
    return float(np.dot(l, (q - m) ** 2) / l.sum())


def qoe(series: QualitySeries, u) -> float:
    """Per-client QoE: (generalized) mean quality minus variability penalty."""
    q, l = _arrays(series)
    if u.uq == "identity":
        m = np.dot(l, q) / l.sum()
    else:
        m = np.dot(l, np.array([u.uq_value(x) for x in q])) / l.sum()
    return float(m - u.uv_value(var_quality(series)))


def phi_total(all_series, u) -> float:
    """Network objective: fairness curve applied to each client's QoE."""
    return sum(u.ue_value(qoe(s, u)) for s in all_series)


def qoe1(series: QualitySeries) -> float:
    return mean_quality(series) - math.sqrt(var_quality(series))


def qoe2(series: QualitySeries) -> float:
    """Mean minus root mean-squared adjacent difference.

    The sum runs over the S-1 adjacent pairs but is normalized by S.
    """
    q, _ = _arrays(series)
    if len(q) < 2:
        raise EmptySeries("need at least two segments for adjacent differences")
    msd = float(np.sum(np.diff(q) ** 2)) / len(q)
    return mean_quality(series) - math.sqrt(msd)


def rebuffer_estimate(series: QualitySeries, sizes_bits, total_alloc_bits: float,
                      n_slots: int, tau_slot: float) -> float:
    """Download-time over watch-time estimate, minus one.

    sizes_bits are the realized per-segment sizes; the allocation is the
    total bits granted over n_slots slots.  Negative values mean download
    outpaces playback.
    """
    _, l = _arrays(series)
    if n_slots < 1 or total_alloc_bits <= 0:
        raise ZeroAllocation("no allocation recorded")
    mean_rate = total_alloc_bits / (n_slots * tau_slot)  # bits per second
    total_bits = float(np.sum(np.asarray(sizes_bits, dtype=float)))
    duration = float(l.sum())
    return total_bits / (mean_rate * duration) - 1.0


def realized_rebuffering(stall_seconds: float, played_seconds: float) -> float:
    """Stall-to-played time ratio; startup delay is excluded by the caller."""
    if played_seconds <= 0.0:
        return 0.0 if stall_seconds <= 0.0 else math.inf
    return stall_seconds / played_seconds


def cost_per_second(series: QualitySeries, sizes_bits, p_d: float) -> float:
    """Average delivery cost per second of video, dollars/s."""
    _, l = _arrays(series)
    total_bits = float(np.sum(np.asarray(sizes_bits, dtype=float)))
    return p_d * total_bits / float(l.sum())


def fairness_ratio(per_client_qoe1) -> float:
    """(max - min) / mean across clients; zero for identical clients."""
    vals = np.asarray(list(per_client_qoe1), dtype=float)
    if vals.size == 0:
        raise EmptySeries("no clients")
    mean = float(vals.mean())
    if mean == 0.0:
        return 0.0
    return float((vals.max() - vals.min()) / mean)
