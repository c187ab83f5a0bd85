"""Discrete-slot streaming simulator.

Each slot: allocate network resources, advance risk trackers, drain
in-flight segment downloads fluidly within the slot, run per-client
adaptation at every completion, and advance playback clocks with stall
accounting.  Everything is deterministic given (config, traces, peaks).

Conventions: allocations are bits per slot; the risk trackers b and d are
stored step-scaled (see adaptation module); downloads drain at constant
rate r/tau inside a slot, so a segment can complete mid-slot and the next
one starts draining immediately with the residual budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .adaptation import (
    ClientParams,
    RmState,
    UtilitySpec,
    select_rm,
    solve_qnova,
    solve_qnova_finite,
)
from .allocation import linear_winner
from .qr_model import VideoTrace, eval_rate


class TraceExhausted(RuntimeError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class EpsilonSchedule:
    """Step-size schedule: warm-up boost, then geometric decay to a floor."""

    initial: float = 0.05
    floor: float = 0.05
    warm_factor: float = 1.0
    warm_slots: int = 2000
    warm_segments: int = 50
    decay: float = 0.9

    def __post_init__(self):
        if self.initial <= 0 or self.floor <= 0:
            raise ValueError("step sizes must be positive")


@dataclass(frozen=True)
class ClientPrefs:
    """Initialization and preference constants for one client."""

    m0: float = 25.0
    v0: float = 0.0
    b0_seconds: float = 40.0
    d0: float = 1.0
    beta_bar: float = 0.0
    p_bar: float = math.inf
    p_d: float = 0.0
    q_max: float = 100.0
    r_min: float = 0.0


@dataclass(frozen=True)
class EngineConfig:
    tau_slot: float = 0.01
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    startup_delay: float = 3.0
    buffer_limit: float | None = None
    throttle_coeff: float = 1.0  # seconds^2
    signaling: str = "ideal"  # ideal | end_of_seg
    signal_latency_slots: int = 0
    allocator: str = "nova"  # nova | pf | shared | fixed
    adapter: str = "qnova_finite"  # qnova | qnova_finite | rm
    fixed_shares: tuple[float, ...] | None = None
    p_v: float = 1.0
    pf_epsilon: float = 0.01
    rho_init: float = 1.0
    loop_videos: bool = True
    check_invariants: bool = False
    log_slots: bool = False
    max_slots: int = 50_000_000
    seed: int = 0

    def __post_init__(self):
        if self.tau_slot <= 0:
            raise ValueError("slot duration must be positive")
        if self.signaling not in ("ideal", "end_of_seg"):
            raise ValueError(f"unknown signaling mode {self.signaling!r}")
        if self.allocator not in ("nova", "pf", "shared", "fixed"):
            raise ValueError(f"unknown allocator {self.allocator!r}")
        if self.adapter not in ("qnova", "qnova_finite", "rm"):
            raise ValueError(f"unknown adapter {self.adapter!r}")
        if self.allocator == "fixed" and self.fixed_shares is None:
            raise ValueError("fixed allocator requires fixed_shares")


@dataclass
class SegmentRecord:
    index: int
    quality: float
    size_bits: float
    start_s: float
    complete_s: float
    length_s: float


def update_ewma(rho: float, r_star: float, epsilon: float) -> float:
    """Mean tracker step: rho' = rho + eps (r* - rho)."""
    return rho + epsilon * (r_star - rho)


def apply_buffer_throttle(pb_current: float, buffer_limit: float,
                          coeff: float = 1.0) -> float:
    """Request delay (seconds) as the buffer approaches its limit.

    Zero below half the limit, growing without bound at the limit itself
    (the caller blocks entirely once pb_current >= buffer_limit).
    """
    if pb_current >= buffer_limit:
        return math.inf
    raw = 1.0 / (buffer_limit - pb_current) - 1.0 / (0.5 * buffer_limit)
    return coeff * max(raw, 0.0)


def apply_completion_updates(p: ClientParams, u: UtilitySpec, eps: float,
                             q_star: float, seg_len: float, rate_bps: float) -> None:
    """Tracker updates run at a segment completion, in contract order."""
    m_old = p.m
    lam_old = p.lam
    ratio = seg_len / lam_old
    amp = u.ue_prime(p.mu - u.uv_value(p.v))
    pull = u.uv_prime(p.v)
    p.m = m_old + eps * amp * pull * (ratio * q_star - m_old)
    p.mu = p.mu + eps * (ratio * u.uq_value(q_star) - p.mu)
    p.v = p.v + eps * (ratio * (q_star - m_old) ** 2 - p.v)
    p.b = max(p.b - eps * seg_len, u.b_floor)
    if p.p_d > 0.0 and math.isfinite(p.p_bar):
        p.d = max(p.d + eps * (p.p_d * seg_len * rate_bps / p.p_bar - lam_old), u.d_floor)
    else:
        p.d = max(p.d - eps * lam_old, u.d_floor)
    p.sigma = p.sigma + eps * (seg_len * rate_bps / lam_old - p.sigma)
    p.lam = lam_old + eps * (seg_len - lam_old)


class _Client:
    __slots__ = (
        "cid", "trace", "params", "prefs", "cursor", "inflight_bits",
        "inflight_q", "inflight_len", "inflight_size", "inflight_start",
        "segs_done", "records", "downloaded_dur", "pos", "stall_s",
        "played_s", "startup_s", "idle_s", "done", "blocked_until",
        "alloc_bits", "active_slots", "rho", "rm_state", "eps_mult",
        "started_duration_s", "events",
    )

    def __init__(self, cid: int, trace: VideoTrace, prefs: ClientPrefs,
                 eps0: float, rho_init: float):
        self.cid = cid
        self.trace = trace
        self.prefs = prefs
        seg1 = trace.segment(1)
        self.params = ClientParams(
            m=prefs.m0, mu=prefs.m0, v=prefs.v0,
            b=prefs.b0_seconds * eps0, d=prefs.d0,
            lam=seg1.length, sigma=seg1.tradeoff.rate_floor,
            q_max=prefs.q_max, beta_bar=prefs.beta_bar,
            p_bar=prefs.p_bar, p_d=prefs.p_d, epsilon=eps0,
        )
        self.cursor = 0
        self.inflight_bits = 0.0
        self.inflight_q = 0.0
        self.inflight_len = 0.0
        self.inflight_size = 0.0
        self.inflight_start = 0.0
        self.segs_done = 0
        self.records: list[SegmentRecord] = []
        self.downloaded_dur = 0.0
        self.pos = 0.0
        self.stall_s = 0.0
        self.played_s = 0.0
        self.startup_s = 0.0
        self.idle_s = 0.0
        self.done = False
        self.blocked_until = 0.0
        self.alloc_bits = 0.0
        self.active_slots = 0
        self.rho = rho_init
        self.rm_state = RmState()
        self.eps_mult = 1.0
        self.started_duration_s = 0.0
        self.events: list[tuple[float, float]] = []


class Engine:
    """World state advanced slot by slot; single-threaded and deterministic."""

    def __init__(self, config: EngineConfig, traces: list[VideoTrace],
                 peaks: np.ndarray, utility: UtilitySpec | None = None,
                 prefs: list[ClientPrefs] | ClientPrefs | None = None,
                 data_peaks: np.ndarray | None = None,
                 horizon_segments: int | None = None):
        self.config = config
        self.u = utility if utility is not None else UtilitySpec(hb_scale=config.epsilon.initial)
        n = len(traces)
        if peaks.ndim != 2 or peaks.shape[1] != n:
            raise ValueError("peaks must be a (slots, clients) array")
        self.peaks = peaks
        self.n = n
        if prefs is None:
            prefs = ClientPrefs()
        if isinstance(prefs, ClientPrefs):
            prefs = [prefs] * n
        eps0 = config.epsilon.initial
        self.clients = [_Client(i, traces[i], prefs[i], eps0, config.rho_init)
                        for i in range(n)]
        self.k = 0
        self.horizon_segments = horizon_segments
        self.signal_queue: list[tuple[int, int, float, float]] = []  # due slot, client, seg len, eps
        self.controller_b = [c.params.b for c in self.clients]
        self.controller_mult = [1.0] * n
        self.slot_log: list[tuple] = []
        self.data_peaks = data_peaks
        if config.allocator == "shared":
            if data_peaks is None:
                raise ValueError("shared allocator requires data_peaks")
            self.data_rho = [config.rho_init] * data_peaks.shape[1]
            self.data_alloc = [0.0] * data_peaks.shape[1]
        else:
            self.data_rho = []
            self.data_alloc = []
        for c in self.clients:
            self._adapt(c, 0.0)
        # the controller starts synced to the post-bootstrap client state
        self.controller_b = [c.params.b for c in self.clients]
        self.signal_queue.clear()

    # ---- step-size schedule ----

    def _refresh_eps_mult(self, c: _Client) -> None:
        sched = self.config.epsilon
        mult_min = sched.floor / sched.initial
        if sched.warm_factor > 1.0 and self.k < sched.warm_slots and c.segs_done < sched.warm_segments:
            c.eps_mult = sched.warm_factor
        elif c.eps_mult > mult_min:
            c.eps_mult = max(mult_min, c.eps_mult * sched.decay)

    def _eps(self, c: _Client) -> float:
        return self.config.epsilon.initial * c.eps_mult

    # ---- adaptation ----

    def _adapt(self, c: _Client, wall: float) -> bool:
        """Select quality for the next segment and run the tracker updates.

        Returns False when the trace is exhausted (non-looping) or the
        segment horizon is reached, which freezes the client.
        """
        nxt = c.cursor + 1
        if self.horizon_segments is not None and c.segs_done >= self.horizon_segments:
            c.done = True
            return False
        if not self.config.loop_videos and nxt > len(c.trace):
            c.done = True
            return False
        try:
            seg = c.trace.segment(nxt, loop=self.config.loop_videos)
        except IndexError as exc:
            raise TraceExhausted(str(exc)) from None
        self._refresh_eps_mult(c)
        p = c.params
        adapter = self.config.adapter
        if adapter == "qnova":
            q, _cert = solve_qnova(p, self.u, seg.tradeoff)
        elif adapter == "qnova_finite":
            q = solve_qnova_finite(p, self.u, seg.tradeoff, seg.finite_qualities)
        else:  # rm
            buffer_s = c.downloaded_dur - c.pos
            rho_bps = c.rho / self.config.tau_slot
            idx, c.rm_state = select_rm(
                buffer_s, rho_bps, seg.tradeoff, seg.finite_qualities,
                (p.p_d, p.p_bar), c.rm_state,
            )
            q = sorted(seg.finite_qualities)[idx - 1]
        rate = eval_rate(seg.tradeoff, q)
        eps = self._eps(c)
        apply_completion_updates(p, self.u, eps, q, seg.length, rate)
        if self.config.check_invariants:
            self._check_bounds(c)
        c.cursor = nxt
        c.inflight_q = q
        c.inflight_len = seg.length
        c.inflight_size = seg.length * rate
        c.inflight_bits = c.inflight_size
        c.inflight_start = wall
        c.started_duration_s += seg.length
        if self.config.signaling == "end_of_seg":
            due = self.k + 1 + self.config.signal_latency_slots
            self.signal_queue.append((due, c.cid, seg.length, eps))
        if self.config.buffer_limit is not None:
            pb = c.downloaded_dur - c.pos
            delay = apply_buffer_throttle(pb, self.config.buffer_limit,
                                          self.config.throttle_coeff)
            c.blocked_until = math.inf if math.isinf(delay) else wall + delay
        return True

    def _check_bounds(self, c: _Client) -> None:
        p = c.params
        qm = p.q_max
        lmin, lmax = c.trace.l_min, c.trace.l_max
        tol = 1e-9
        checks = [
            (-tol <= p.m <= qm + tol, f"m={p.m}"),
            (-tol <= p.mu <= qm + tol, f"mu={p.mu}"),
            (-tol <= p.v <= qm * qm + tol, f"v={p.v}"),
            (p.b >= self.u.b_floor - tol, f"b={p.b}"),
            (p.d >= self.u.d_floor - tol, f"d={p.d}"),
            (lmin - tol <= p.lam <= lmax + tol, f"lam={p.lam}"),
        ]
        for ok, desc in checks:
            if not ok:
                raise InvariantViolation(f"client {c.cid} tracker out of bounds: {desc}")

    # ---- slot machinery ----

    def step_slot(self) -> None:
        cfg = self.config
        tau = cfg.tau_slot
        k = self.k
        wall0 = k * tau
        row = self.peaks[k % self.peaks.shape[0]]

        if self.signal_queue:
            remaining = []
            for due, cid, seg_len, eps in self.signal_queue:
                if due <= k:
                    self.controller_b[cid] = max(
                        self.controller_b[cid] - eps * seg_len, self.u.b_floor)
                else:
                    remaining.append((due, cid, seg_len, eps))
            self.signal_queue = remaining

        r = self._allocate(row)

        if cfg.log_slots:
            for c in self.clients:
                b_src = self.controller_b[c.cid] if cfg.signaling == "end_of_seg" else c.params.b
                self.slot_log.append((k, c.cid, r[c.cid], c.params.b, b_src))

        for c in self.clients:
            if c.done:
                continue
            eps = self._eps(c)
            c.params.b += eps * tau / (1.0 + c.params.beta_bar)
            if cfg.signaling == "end_of_seg":
                self.controller_b[c.cid] += eps * tau / (1.0 + c.params.beta_bar)
            c.rho = update_ewma(c.rho, r[c.cid], cfg.pf_epsilon)
            c.alloc_bits += r[c.cid]
            c.active_slots += 1

        for c in self.clients:
            c.events.clear()
            if not c.done and r[c.cid] > 0.0:
                self._drain(c, r[c.cid], wall0, tau)

        for c in self.clients:
            self._advance_playback(c, wall0, tau)

        self.k += 1

    def _allocate(self, row) -> list[float]:
        cfg = self.config
        n = self.n
        live = [i for i in range(n) if not self.clients[i].done]
        r = [0.0] * n
        if not live:
            return r
        if cfg.allocator == "fixed":
            for i in live:
                r[i] = cfg.fixed_shares[i] * float(row[i])
            return r
        if cfg.allocator == "nova":
            if cfg.signaling == "end_of_seg":
                weights = [self.u.hb(self.controller_b[i]) for i in live]
            else:
                weights = [self.u.hb(self.clients[i].params.b) for i in live]
        elif cfg.allocator == "pf":
            weights = [1.0 / self.clients[i].rho for i in live]
        else:  # shared
            if cfg.signaling == "end_of_seg":
                weights = [cfg.p_v * self.u.hb(self.controller_b[i]) for i in live]
            else:
                weights = [cfg.p_v * self.u.hb(self.clients[i].params.b) for i in live]
        peaks = [float(row[i]) for i in live]
        rmins = [self.clients[i].prefs.r_min for i in live]
        if cfg.allocator == "shared":
            drow = self.data_peaks[self.k % self.data_peaks.shape[0]]
            m = len(self.data_rho)
            weights = weights + [1.0 / self.data_rho[j] for j in range(m)]
            peaks = peaks + [float(drow[j]) for j in range(m)]
            rmins = rmins + [0.0] * m
            alloc, _obj, _win = linear_winner(weights, peaks, rmins)
            for pos, i in enumerate(live):
                r[i] = alloc[pos]
            for j in range(m):
                rj = alloc[len(live) + j]
                self.data_rho[j] = update_ewma(self.data_rho[j], rj, cfg.pf_epsilon)
                self.data_alloc[j] += rj
            return r
        alloc, _obj, _win = linear_winner(weights, peaks, rmins)
        for pos, i in enumerate(live):
            r[i] = alloc[pos]
        return r

    def _drain(self, c: _Client, budget_bits: float, wall0: float, tau: float) -> None:
        rate = budget_bits / tau  # bits per second, fluid within the slot
        t = wall0
        time_left = tau
        while time_left > 1e-15 and not c.done:
            if c.blocked_until > t:
                if math.isinf(c.blocked_until):
                    pb = c.downloaded_dur - c.pos
                    if self.config.buffer_limit is not None and pb < self.config.buffer_limit:
                        delay = apply_buffer_throttle(
                            pb, self.config.buffer_limit, self.config.throttle_coeff)
                        c.blocked_until = t + delay
                    else:
                        return
                skip = min(c.blocked_until - t, time_left)
                t += skip
                time_left -= skip
                continue
            if c.inflight_bits <= 1e-12:
                return
            need_s = c.inflight_bits / rate
            if need_s <= time_left:
                t += need_s
                time_left -= need_s
                c.inflight_bits = 0.0
                self._complete(c, t)
            else:
                c.inflight_bits -= rate * time_left
                time_left = 0.0

    def _complete(self, c: _Client, wall: float) -> None:
        c.records.append(SegmentRecord(
            index=c.cursor, quality=c.inflight_q, size_bits=c.inflight_size,
            start_s=c.inflight_start, complete_s=wall, length_s=c.inflight_len,
        ))
        c.segs_done += 1
        c.downloaded_dur += c.inflight_len
        c.events.append((wall, c.inflight_len))
        self._adapt(c, wall)

    def _advance_playback(self, c: _Client, wall0: float, tau: float) -> None:
        end = wall0 + tau
        t = wall0
        events = c.events
        ei = 0
        played_dur = c.downloaded_dur - sum(d for _, d in events)  # playable at slot start
        startup = self.config.startup_delay
        while t < end - 1e-15:
            while ei < len(events) and events[ei][0] <= t + 1e-15:
                played_dur += events[ei][1]
                ei += 1
            boundary = min(events[ei][0], end) if ei < len(events) else end
            if boundary <= t + 1e-15:
                boundary = end
            if t < startup:
                step = min(boundary, startup) - t
                c.startup_s += step
                t += step
                continue
            if c.done and c.pos >= c.downloaded_dur - 1e-12:
                c.idle_s += end - t
                return
            avail = played_dur - c.pos
            dt = boundary - t
            if avail <= 1e-12:
                c.stall_s += dt
                t = boundary
            else:
                play = min(dt, avail)
                c.pos += play
                c.played_s += play
                t += play

    # ---- top level ----

    def all_done(self) -> bool:
        return all(c.done for c in self.clients)

    def outcome(self) -> "SimOutcome":
        return SimOutcome(self)


class SimOutcome:
    """Snapshot of a finished run: timelines, final trackers, counters."""

    def __init__(self, engine: Engine):
        self.tau_slot = engine.config.tau_slot
        self.seed = engine.config.seed
        self.n_slots = engine.k
        self.config = engine.config
        self.clients = engine.clients
        self.slot_log = engine.slot_log
        self.data_rho = list(engine.data_rho)
        self.data_alloc = list(engine.data_alloc)

    def records(self, cid: int, limit: int | None = None) -> list[SegmentRecord]:
        recs = self.clients[cid].records
        return recs[:limit] if limit is not None else recs

    def to_dict(self) -> dict:
        return {
            "tau_slot": self.tau_slot,
            "seed": self.seed,
            "n_slots": self.n_slots,
            "clients": [
                {
                    "id": c.cid,
                    "final": {
                        "m": c.params.m, "mu": c.params.mu, "v": c.params.v,
                        "b": c.params.b, "d": c.params.d, "lam": c.params.lam,
                        "sigma": c.params.sigma,
                    },
                    "alloc_bits": c.alloc_bits,
                    "active_slots": c.active_slots,
                    "stall_s": c.stall_s,
                    "played_s": c.played_s,
                    "startup_s": c.startup_s,
                    "segments": [
                        [r.index, r.quality, r.size_bits, r.start_s, r.complete_s, r.length_s]
                        for r in c.records
                    ],
                }
                for c in self.clients
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def segment_csv(self) -> str:
        lines = ["segment,client,q,size_bits,t_complete"]
        for c in self.clients:
            for r in c.records:
                lines.append(f"{r.index},{c.cid},{r.quality!r},{r.size_bits!r},{r.complete_s!r}")
        return "\n".join(lines) + "\n"

    def slot_csv(self) -> str:
        lines = ["slot,client,r_bits,b,b_controller"]
        for k, cid, rb, b, bb in self.slot_log:
            lines.append(f"{k},{cid},{rb!r},{b!r},{bb!r}")
        return "\n".join(lines) + "\n"


def run(config: EngineConfig, traces: list[VideoTrace], peaks: np.ndarray,
        horizon: tuple[str, int], utility: UtilitySpec | None = None,
        prefs=None, data_peaks: np.ndarray | None = None) -> SimOutcome:
    """Run a full simulation; deterministic in (config, traces, peaks)."""
    kind, count = horizon
    if kind not in ("slots", "segments"):
        raise ValueError(f"unknown horizon kind {kind!r}")
    horizon_segments = count if kind == "segments" else None
    eng = Engine(config, traces, peaks, utility=utility, prefs=prefs,
                 data_peaks=data_peaks, horizon_segments=horizon_segments)
    if kind == "slots":
        for _ in range(count):
            eng.step_slot()
    else:
        while not eng.all_done():
            if eng.k >= config.max_slots:
                raise TraceExhausted(f"segment horizon unreached after {eng.k} slots")
            eng.step_slot()
    return eng.outcome()
