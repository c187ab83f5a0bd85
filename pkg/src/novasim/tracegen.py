"""Synthetic inputs: correlated peak-rate traces and ladder videos.

Peak-rate traces come from a stay-or-redraw Markov chain whose stationary
marginal equals the requested finite marginal exactly for any persistence
level.  Videos use the six-rate ladder with per-segment jitter in the
quality assignment so that the rate-vs-quality map stays convex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qr_model import QrTradeoff, Segment, VideoTrace, validate_knots

LADDER_BPS = (0.1e6, 0.2e6, 0.3e6, 0.6e6, 0.9e6, 1.5e6)


@dataclass(frozen=True)
class PeakRateSpec:
    """Finite marginal plus one-step persistence for a peak-rate trace."""

    support: tuple[float, ...]  # bits per slot
    probabilities: tuple[float, ...]
    corr: float = 0.0  # stay probability
    length: int = 0
    scale_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if len(self.support) != len(self.probabilities):
            raise ValueError("support and probabilities differ in length")
        if any(p < 0 for p in self.probabilities):
            raise ValueError("probabilities must be non-negative")
        total = sum(self.probabilities)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, expected 1")
        if any(s <= 0 for s in self.support):
            raise ValueError("support must be positive")
        if not 0.0 <= self.corr < 1.0:
            raise ValueError("persistence must lie in [0, 1)")


def default_peak_spec(tau_slot: float = 0.01, corr: float = 0.98, length: int = 15000,
                      n_points: int = 8, lo_mbps: float = 0.5, hi_mbps: float = 4.0,
                      scale_range: tuple[float, float] = (0.5, 1.5)) -> PeakRateSpec:
    """Discretized log-normal marginal over [lo, hi] Mbps, in bits per slot.

    Stand-in for a measured cellular capacity distribution.
    """
    edges = np.geomspace(lo_mbps, hi_mbps, n_points + 1)
    mids = np.sqrt(edges[:-1] * edges[1:])
    mu, sig = np.log(np.sqrt(lo_mbps * hi_mbps)), 0.5
    dens = np.exp(-0.5 * ((np.log(mids) - mu) / sig) ** 2) / mids
    probs = dens / dens.sum()
    support = tuple(float(m) * 1e6 * tau_slot for m in mids)
    return PeakRateSpec(support=support, probabilities=tuple(float(p) for p in probs),
                        corr=corr, length=length, scale_range=scale_range)


def gen_peak_trace(spec: PeakRateSpec, seed: int, length: int | None = None) -> np.ndarray:
    """Markov peak-rate trace: stay with probability corr, else redraw.

    The redraw is from the target marginal, so the chain is stationary with
    exactly that marginal from the first slot.  Deterministic per seed.
    """
    n = length if length is not None else spec.length
    if n <= 0:
        raise ValueError("trace length must be positive")
    rng = np.random.default_rng(seed)
    support = np.asarray(spec.support, dtype=float)
    probs = np.asarray(spec.probabilities, dtype=float)
    idx = np.empty(n, dtype=np.int64)
    idx[0] = rng.choice(len(support), p=probs)
    if spec.corr == 0.0:
        idx[1:] = rng.choice(len(support), size=n - 1, p=probs)
    else:
        stay = rng.random(n - 1) < spec.corr
        redraws = rng.choice(len(support), size=n - 1, p=probs)
        cur = idx[0]
        for k in range(1, n):
            if not stay[k - 1]:
                cur = redraws[k - 1]
            idx[k] = cur
    return support[idx]


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def gen_peak_matrix(spec: PeakRateSpec, n_clients: int, seed,
                    length: int | None = None, heterogeneous: bool = True) -> np.ndarray:
    """Stack of per-client traces, each scaled by a uniform per-client factor."""
    root = _seed_sequence(seed)
    scale_seed, *trace_seeds = root.spawn(n_clients + 1)
    scale_rng = np.random.default_rng(scale_seed)
    lo, hi = spec.scale_range
    cols = []
    for i in range(n_clients):
        trace = gen_peak_trace(spec, trace_seeds[i], length)
        scale = scale_rng.uniform(lo, hi) if heterogeneous else 1.0
        cols.append(trace * scale)
    return np.column_stack(cols)


@dataclass(frozen=True)
class VideoSpec:
    """Ladder rates plus the randomized quality-assignment model."""

    ladder_bps: tuple[float, ...] = LADDER_BPS
    q_top_mean: float = 85.0
    q_top_jitter: float = 0.08
    shape_mean: float = 0.55
    shape_jitter: float = 0.15
    q_cap: float = 100.0
    segment_seconds: float = 1.0

    def __post_init__(self):
        if list(self.ladder_bps) != sorted(self.ladder_bps):
            raise ValueError("ladder must be sorted ascending")


def gen_video(spec: VideoSpec, n_segments: int, seed: int, client_id: int = 0) -> VideoTrace:
    """Ladder video with per-segment concave quality-vs-rate assignment.

    Quality at rate r follows q_top * ((r - r0)/(r_top - r0))^shape with the
    exponent in (0, 1), which makes the inverse rate-vs-quality map convex;
    jitter on (q_top, shape) models content diversity.  Every generated
    tradeoff passes the structural validation.
    """
    rng = np.random.default_rng(seed)
    rates = np.asarray(spec.ladder_bps, dtype=float)
    rel = (rates - rates[0]) / (rates[-1] - rates[0])
    segments = []
    for s in range(1, n_segments + 1):
        q_top = spec.q_top_mean * float(np.exp(spec.q_top_jitter * rng.standard_normal()))
        q_top = min(q_top, spec.q_cap)
        shape = spec.shape_mean * float(np.exp(spec.shape_jitter * rng.standard_normal()))
        shape = float(np.clip(shape, 0.15, 0.95))
        qualities = q_top * rel ** shape
        tr = QrTradeoff(qualities=tuple(float(q) for q in qualities),
                        rates=tuple(float(r) for r in rates))
        assert not validate_knots(tr.qualities, tr.rates)
        segments.append(Segment(index=s, length=spec.segment_seconds, tradeoff=tr,
                                finite_qualities=tr.qualities))
    return VideoTrace(client_id=client_id, segments=segments)


def gen_videos(spec: VideoSpec, n_clients: int, n_segments: int, seed) -> list[VideoTrace]:
    root = _seed_sequence(seed)
    seeds = root.spawn(n_clients)
    return [gen_video(spec, n_segments, seeds[i], client_id=i) for i in range(n_clients)]


def peaks_to_csv(peaks: np.ndarray) -> str:
    lines = ["slot,client,peak_bits"]
    for k in range(peaks.shape[0]):
        for i in range(peaks.shape[1]):
            lines.append(f"{k},{i},{peaks[k, i]!r}")
    return "\n".join(lines) + "\n"
