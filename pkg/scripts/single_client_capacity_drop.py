#!/usr/bin/env python3
"""Trace one client's adaptation through an abrupt capacity drop.

The allocation is exogenous: full rate until t=50s, a 70% drop between
50s and 100s, then recovery.  Prints a per-second table of the risk
tracker, chosen quality and playback buffer, showing the tracker ramping
up through the drop and forcing low-rate representations.

    python scripts/single_client_capacity_drop.py [out.csv]
"""

import sys

import numpy as np

from novasim.adaptation import UtilitySpec
from novasim.nova_engine import ClientPrefs, EngineConfig, EpsilonSchedule, run
from novasim.tracegen import VideoSpec, gen_video

TAU = 0.01


def main() -> int:
    trace = gen_video(VideoSpec(), 200, seed=42)
    slots = 20_000
    peaks = np.full((slots, 1), 1.2e6 * TAU)
    peaks[5000:10000, 0] = 0.36e6 * TAU  # capacity drop at 50s..100s
    cfg = EngineConfig(
        tau_slot=TAU,
        epsilon=EpsilonSchedule(initial=0.05, floor=0.05, warm_factor=1.0),
        allocator="fixed", fixed_shares=(1.0,), adapter="qnova_finite",
        log_slots=True,
    )
    u = UtilitySpec(uv_eta=0.05, hb_h0=5e-6, hb_scale=0.05)
    out = run(cfg, [trace], peaks, ("slots", slots), utility=u,
              prefs=ClientPrefs(r_min=0.001))
    c = out.clients[0]
    rows = ["t_s,quality,risk_b,buffer_s"]
    by_second = {}
    for r in c.records:
        by_second[int(r.complete_s)] = r.quality
    b_by_slot = {k: b for k, _cid, _r, b, _bb in out.slot_log}
    buf = 0.0
    pos = 0.0
    for t in range(0, int(slots * TAU), 5):
        q = by_second.get(t, float("nan"))
        b = b_by_slot.get(int(t / TAU), float("nan"))
        done = sum(r.length_s for r in c.records if r.complete_s <= t)
        buf = max(done - max(t - cfg.startup_delay, 0.0), 0.0)
        rows.append(f"{t},{q!r},{b!r},{buf!r}")
    text = "\n".join(rows) + "\n"
    if len(sys.argv) > 1:
        with open(sys.argv[1], "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
