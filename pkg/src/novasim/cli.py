"""Experiment driver: scenario files, batch replication, CSV/JSON results.

Scenario files are JSON (see README for the schema and a shipped example).
Subcommands: run, compare, oracle, gen-traces.  Replications fan out to a
process pool sized by NOVASIM_WORKERS (default: CPU count, capped at 8);
aggregation sorts rows so output order never depends on scheduling.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import metrics as met
from .adaptation import UtilitySpec
from .nova_engine import ClientPrefs, EngineConfig, EpsilonSchedule, run
from .oracle import (
    ClientModel,
    FlAtom,
    InfeasibleModel,
    OraclePrefs,
    StationaryModel,
    solve_optstat,
    verify_kkt_optstat,
)
from .qr_model import QrTradeoff, traces_from_json
from .tracegen import (
    VideoSpec,
    default_peak_spec,
    gen_peak_matrix,
    gen_videos,
    peaks_to_csv,
)

ALGORITHMS = {
    "nova": ("nova", "qnova_finite"),
    "nova_continuous": ("nova", "qnova"),
    "pf_qnova": ("pf", "qnova_finite"),
    "pf_rm": ("pf", "rm"),
}

CLIENT_CSV_COLUMNS = (
    "scenario,algorithm,n_clients,seed,client,mean_quality,var_quality,"
    "qoe1,qoe2,rebuffer_est,rebuffer_real,cost_per_s,stall_s,played_s"
)
AGGREGATE_CSV_COLUMNS = "scenario,algorithm,n_clients,metric,mean,stderr,n_seeds"


class ScenarioError(ValueError):
    pass


def load_scenario(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {path} is not valid JSON: {exc}") from None
    doc.setdefault("name", p.stem)
    doc["_dir"] = str(p.parent)
    return doc


def build_utility(scn: dict) -> UtilitySpec:
    u = scn.get("utility", {})
    eps = scn.get("epsilon", {}).get("initial", 0.05)
    return UtilitySpec(
        ue=u.get("ue", "identity"),
        ue_alpha=u.get("ue_alpha", 1.0),
        ue_shift=u.get("ue_shift", 1.0),
        uv=u.get("uv", "linear"),
        uv_eta=u.get("uv_eta", 0.05),
        uq=u.get("uq", "identity"),
        uq_shift=u.get("uq_shift", 1.0),
        hb_h0=u.get("hb_h0", 5e-6),  # tuned to bits/s rate scales
        hb_knee=u.get("hb_knee", 20.0),
        hb_scale=u.get("hb_scale", eps),
        hd_slope=u.get("hd_slope", 10.0),
    )


def build_prefs(scn: dict) -> ClientPrefs:
    p = scn.get("prefs", {})
    p_bar = p.get("p_bar")
    return ClientPrefs(
        m0=p.get("m0", 25.0),
        v0=p.get("v0", 0.0),
        b0_seconds=p.get("b0_seconds", 40.0),
        d0=p.get("d0", 1.0),
        beta_bar=p.get("beta_bar", 0.0),
        p_bar=math.inf if p_bar is None else float(p_bar),
        p_d=p.get("p_d", 0.0),
        q_max=p.get("q_max", 100.0),
        r_min=p.get("r_min", 0.0),
    )


def build_engine_config(scn: dict, algorithm: str, seed: int) -> EngineConfig:
    eps = scn.get("epsilon", {})
    allocator, adapter = ALGORITHMS.get(algorithm, (None, None))
    if allocator is None:
        raise ScenarioError(f"unknown algorithm {algorithm!r}; "
                            f"choose from {sorted(ALGORITHMS)}")
    return EngineConfig(
        tau_slot=scn.get("tau_slot", 0.01),
        epsilon=EpsilonSchedule(
            initial=eps.get("initial", 0.05),
            floor=eps.get("floor", eps.get("initial", 0.05)),
            warm_factor=eps.get("warm_factor", 1.0),
            warm_slots=eps.get("warm_slots", 2000),
            warm_segments=eps.get("warm_segments", 50),
            decay=eps.get("decay", 0.9),
        ),
        startup_delay=scn.get("startup_delay", 3.0),
        buffer_limit=scn.get("buffer_limit"),
        allocator=allocator,
        adapter=adapter,
        signaling=scn.get("signaling", "ideal"),
        pf_epsilon=scn.get("pf_epsilon", 0.01),
        rho_init=scn.get("rho_init", 1.0),
        loop_videos=scn.get("loop_videos", True),
        check_invariants=scn.get("check_invariants", False),
        seed=seed,
    )


def _load_inputs(scn: dict, n: int, seed: int):
    video = scn.get("video", {})
    n_segments = scn.get("n_segments", 600)
    root = np.random.SeedSequence([seed, n, scn.get("trace_salt", 0)])
    video_seed, peak_seed = root.spawn(2)
    if "file" in video:
        path = Path(scn["_dir"]) / video["file"]
        if not path.exists():
            raise ScenarioError(f"trace file not found: {path}")
        traces = traces_from_json(path.read_text())[:n]
    else:
        vspec = VideoSpec(
            ladder_bps=tuple(r * 1e6 for r in video.get("ladder_mbps", (0.1, 0.2, 0.3, 0.6, 0.9, 1.5))),
            q_top_mean=video.get("q_top_mean", 85.0),
            q_top_jitter=video.get("q_top_jitter", 0.08),
            shape_mean=video.get("shape_mean", 0.55),
            shape_jitter=video.get("shape_jitter", 0.15),
            segment_seconds=video.get("segment_seconds", 1.0),
        )
        traces = gen_videos(vspec, n, n_segments, video_seed)
    pk = scn.get("peaks", {})
    tau = scn.get("tau_slot", 0.01)
    pspec = default_peak_spec(
        tau_slot=tau,
        corr=pk.get("corr", 0.98),
        length=pk.get("length", 150_000),
        lo_mbps=pk.get("lo_mbps", 0.5),
        hi_mbps=pk.get("hi_mbps", 4.0),
        scale_range=tuple(pk.get("scale_range", (0.5, 1.5))),
    )
    peaks = gen_peak_matrix(pspec, n, peak_seed, heterogeneous=pk.get("heterogeneous", True))
    return traces, peaks


def simulate_job(args: tuple) -> list[dict]:
    """One (algorithm, n_clients, seed) replication; returns per-client rows."""
    scn, algorithm, n, seed = args
    traces, peaks = _load_inputs(scn, n, seed)
    config = build_engine_config(scn, algorithm, seed)
    utility = build_utility(scn)
    prefs = build_prefs(scn)
    n_segments = scn.get("n_segments", 600)
    outcome = run(config, traces, peaks, ("segments", n_segments),
                  utility=utility, prefs=prefs)
    rows = []
    qoe1_values = []
    for c in outcome.clients:
        recs = c.records[:n_segments]
        series = met.QualitySeries(
            qualities=tuple(r.quality for r in recs),
            lengths=tuple(r.length_s for r in recs),
            client_id=c.cid,
        )
        sizes = [r.size_bits for r in recs]
        est = met.rebuffer_estimate(series, sizes, c.alloc_bits, c.active_slots,
                                    config.tau_slot)
        realized = met.realized_rebuffering(c.stall_s, c.played_s)
        row = {
            "scenario": scn["name"],
            "algorithm": algorithm,
            "n_clients": n,
            "seed": seed,
            "client": c.cid,
            "mean_quality": met.mean_quality(series),
            "var_quality": met.var_quality(series),
            "qoe1": met.qoe1(series),
            "qoe2": met.qoe2(series),
            "rebuffer_est": est,
            "rebuffer_real": realized,
            "cost_per_s": met.cost_per_second(series, sizes, prefs.p_d),
            "stall_s": c.stall_s,
            "played_s": c.played_s,
        }
        rows.append(row)
        qoe1_values.append(row["qoe1"])
    fairness = met.fairness_ratio(qoe1_values)
    for row in rows:
        row["fairness"] = fairness
    return rows


def _pool_size() -> int:
    env = os.environ.get("NOVASIM_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, min(os.cpu_count() or 1, 8))


def run_replications(scn: dict, algorithms, n_values, seeds) -> list[dict]:
    jobs = [(scn, alg, n, seed) for alg in algorithms for n in n_values for seed in seeds]
    workers = _pool_size()
    if workers > 1 and len(jobs) > 1:
        with Pool(workers) as pool:
            chunks = pool.map(simulate_job, jobs)
    else:
        chunks = [simulate_job(j) for j in jobs]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r["algorithm"], r["n_clients"], r["seed"], r["client"]))
    return rows


def write_client_csv(rows, path: Path, deterministic: bool) -> None:
    lines = []
    if not deterministic:
        lines.append(f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}")
    lines.append(CLIENT_CSV_COLUMNS)
    for r in rows:
        lines.append(
            f"{r['scenario']},{r['algorithm']},{r['n_clients']},{r['seed']},"
            f"{r['client']},{r['mean_quality']!r},{r['var_quality']!r},"
            f"{r['qoe1']!r},{r['qoe2']!r},{r['rebuffer_est']!r},"
            f"{r['rebuffer_real']!r},{r['cost_per_s']!r},{r['stall_s']!r},"
            f"{r['played_s']!r}"
        )
    path.write_text("\n".join(lines) + "\n")


AGG_METRICS = ("qoe1", "qoe2", "mean_quality", "rebuffer_real", "cost_per_s", "fairness")


def aggregate_rows(rows) -> list[dict]:
    """Per (scenario, algorithm, n): seed-mean and stderr of each metric."""
    by_key: dict = {}
    for r in rows:
        by_key.setdefault((r["scenario"], r["algorithm"], r["n_clients"]), []).append(r)
    out = []
    for (scenario, alg, n), group in sorted(by_key.items()):
        by_seed: dict = {}
        for r in group:
            by_seed.setdefault(r["seed"], []).append(r)
        seed_means = {metric: [] for metric in AGG_METRICS}
        for _seed, items in sorted(by_seed.items()):
            for metric in AGG_METRICS:
                seed_means[metric].append(float(np.mean([it[metric] for it in items])))
        for metric in AGG_METRICS:
            vals = np.asarray(seed_means[metric])
            stderr = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            out.append({
                "scenario": scenario, "algorithm": alg, "n_clients": n,
                "metric": metric, "mean": float(vals.mean()),
                "stderr": stderr, "n_seeds": len(vals),
            })
    return out


def write_aggregate_csv(aggs, path: Path, deterministic: bool) -> None:
    lines = []
    if not deterministic:
        lines.append(f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}")
    lines.append(AGGREGATE_CSV_COLUMNS)
    for a in aggs:
        lines.append(
            f"{a['scenario']},{a['algorithm']},{a['n_clients']},{a['metric']},"
            f"{a['mean']!r},{a['stderr']!r},{a['n_seeds']}"
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_run(args) -> int:
    scn = load_scenario(args.scenario)
    seeds = _parse_seeds(args.seeds) or scn.get("seeds", [0])
    n_values = scn.get("n_clients", [scn.get("n", 4)])
    if isinstance(n_values, int):
        n_values = [n_values]
    algorithm = scn.get("algorithm", "nova")
    rows = run_replications(scn, [algorithm], n_values, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_client_csv(rows, out / "clients.csv", args.deterministic)
    write_aggregate_csv(aggregate_rows(rows), out / "aggregates.csv", args.deterministic)
    return 0


def cmd_compare(args) -> int:
    scn = load_scenario(args.scenario)
    algorithms = (args.algorithms.split(",") if args.algorithms
                  else scn.get("algorithms", []))
    algorithms = [a for a in algorithms if a]
    if len(algorithms) < 2:
        raise ScenarioError("compare needs at least two algorithms")
    seeds = _parse_seeds(args.seeds) or scn.get("seeds", [0])
    n_values = scn.get("n_clients", [scn.get("n", 4)])
    if isinstance(n_values, int):
        n_values = [n_values]
    rows = run_replications(scn, algorithms, n_values, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_client_csv(rows, out / "clients.csv", args.deterministic)
    write_aggregate_csv(aggregate_rows(rows), out / "comparison.csv", args.deterministic)
    return 0


def _model_from_doc(doc: dict):
    clients = []
    for cl in doc["clients"]:
        atoms = []
        for a in cl["atoms"]:
            tr = QrTradeoff(
                qualities=tuple(float(q) for q, _r in a["knots"]),
                rates=tuple(float(r) for _q, r in a["knots"]),
            )
            atoms.append(FlAtom(tradeoff=tr, length=float(a["l_seconds"]),
                                prob=float(a["prob"])))
        clients.append(ClientModel(atoms=tuple(atoms)))
    model = StationaryModel(
        peaks=tuple(tuple(float(x) for x in pk) for pk in doc["peaks"]),
        constraint_probs=tuple(float(p) for p in doc["constraint_probs"]),
        clients=tuple(clients),
        tau_slot=float(doc.get("tau_slot", 0.01)),
        r_min=tuple(float(x) for x in doc.get("r_min", ())),
    )
    prefs = [
        OraclePrefs(
            beta_bar=float(p.get("beta_bar", 0.0)),
            p_bar=float(p["p_bar"]) if p.get("p_bar") is not None else math.inf,
            p_d=float(p.get("p_d", 0.0)),
        )
        for p in doc.get("prefs", [{}] * len(clients))
    ]
    u_doc = {"utility": doc.get("utility", {}), "epsilon": {"initial": 0.05}}
    return model, prefs, build_utility(u_doc)


def cmd_oracle(args) -> int:
    path = Path(args.instance)
    if not path.exists():
        raise ScenarioError(f"instance file not found: {path}")
    doc = json.loads(path.read_text())
    model, prefs, utility = _model_from_doc(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.verify:
        from .oracle import OptstatSolution

        stored = json.loads(Path(args.verify).read_text())
        sol = OptstatSolution.from_dict(stored.get("solution", stored))
        report = verify_kkt_optstat(sol, model, prefs, utility)
        (out / "residuals.json").write_text(json.dumps(report, sort_keys=True))
        print(f"max_residual={report['max_residual']:.3e}")
        return 0
    try:
        sol = solve_optstat(model, prefs, utility)
    except InfeasibleModel as exc:
        (out / "certificate.json").write_text(json.dumps(
            {"status": "infeasible", "reason": str(exc)}, sort_keys=True))
        print(f"infeasible: {exc}", file=sys.stderr)
        return 1
    report = verify_kkt_optstat(sol, model, prefs, utility)
    payload = {"status": "ok", "solution": sol.to_dict(), "certificate": report}
    (out / "certificate.json").write_text(json.dumps(payload, sort_keys=True))
    print(f"value={sol.value!r} max_residual={report['max_residual']:.3e}")
    return 0


def cmd_gen_traces(args) -> int:
    scn = load_scenario(args.scenario)
    n_values = scn.get("n_clients", [scn.get("n", 4)])
    if isinstance(n_values, int):
        n_values = [n_values]
    n = max(n_values)
    seeds = _parse_seeds(args.seeds) or scn.get("seeds", [0])
    traces, peaks = _load_inputs(scn, n, seeds[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .qr_model import traces_to_json

    (out / "traces.json").write_text(traces_to_json(traces))
    (out / "peaks.csv").write_text(peaks_to_csv(peaks[: scn.get("peaks_csv_slots", 2000)]))
    return 0


def _parse_seeds(text):
    if not text:
        return None
    return [int(x) for x in text.split(",") if x.strip() != ""]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="novasim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True, help="scenario JSON path")
        p.add_argument("--seeds", default="", help="comma-separated seed list")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="suppress timestamp headers for byte-stable output")

    p_run = sub.add_parser("run", help="run one algorithm over the scenario grid")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several algorithms and tabulate")
    common(p_cmp)
    p_cmp.add_argument("--algorithms", default="", help="comma-separated names")
    p_cmp.set_defaults(func=cmd_compare)

    p_or = sub.add_parser("oracle", help="solve a stationary instance file")
    p_or.add_argument("--instance", required=True)
    p_or.add_argument("--out", default="out")
    p_or.set_defaults(func=cmd_oracle)

    p_gen = sub.add_parser("gen-traces", help="emit trace/peak files for a scenario")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen_traces)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
