#!/usr/bin/env python3
"""Run the joint algorithm against the PF baselines on a scenario file.

Thin wrapper over the batch driver so the main comparison is one command:

    python scripts/compare_baselines.py [scenario.json] [outdir]

Emits clients.csv (per-client rows) and comparison.csv (per-N mean/stderr
long format) under the output directory.
"""

import sys
from pathlib import Path

from novasim.cli import main

if __name__ == "__main__":
    scenario = sys.argv[1] if len(sys.argv) > 1 else str(
        Path(__file__).resolve().parent.parent / "scenarios" / "heterogeneous_default.json")
    out = sys.argv[2] if len(sys.argv) > 2 else "out/compare"
    sys.exit(main(["compare", "--scenario", scenario, "--out", out,
                   "--deterministic"]))
