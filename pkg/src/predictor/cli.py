"""Command-line entry point: ``predictor run|compare|fairness|selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics, report
from .fairness import FairnessError, FairnessProblem, min_r_max, solve_maxmin_qp, verify_maxmin, water_filling
from .scenario import POLICIES, Scenario, ScenarioError, load_scenario
from .simulator import SimulationError, run

logger = logging.getLogger("predictor")


def _setup_logging(quiet: bool) -> None:
    level = os.environ.get("PREDICTOR_LOG", "WARNING").upper()
    if quiet:
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> Scenario:
    sc = load_scenario(args.scenario)
    if getattr(args, "policy", None):
        sc = sc.with_policy(args.policy)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        sc = replace(sc, seed=args.seed)
    return sc


def _run_one(sc: Scenario, out: Path, figures: bool):
    tic = time.perf_counter()
    trace = run(sc)
    wall = time.perf_counter() - tic
    m = metrics.compute(trace)
    report.write_run(trace, m, out, wall_time=wall, figures=figures)
    return trace, m


def cmd_run(args) -> int:
    sc = _load(args)
    trace, m = _run_one(sc, Path(args.out), not args.no_figures)
    if not args.quiet:
        print(report.format_summary(m))
    if trace.violations:
        print(f"{len(trace.violations)} queue-limit violations logged", file=sys.stderr)
        return 1
    return 0


def cmd_compare(args) -> int:
    base = _load(args)
    out = Path(args.out)
    results = {}
    status = 0
    for policy in POLICIES:
        trace, m = _run_one(base.with_policy(policy), out / policy, not args.no_figures)
        results[policy] = m
        if trace.violations:
            status = 1
        if not args.quiet:
            print(report.format_summary(m))
            print()
    pred, tor = results["predictor"], results["baseline"]
    ratio = tor.overall_latency_ms / pred.overall_latency_ms if pred.overall_latency_ms > 0 else math.nan
    table = {
        "scenario": base.name,
        "latency_ms": {"predictor": report._num(pred.overall_latency_ms), "baseline": report._num(tor.overall_latency_ms)},
        "latency_ratio": report._num(ratio),
        "jain_index": {"predictor": report._num(pred.jain), "baseline": report._num(tor.jain)},
        "delivered_total": {"predictor": int(pred.delivered.sum()), "baseline": int(tor.delivered.sum())},
        "max_backlog": {"predictor": int(pred.backlog.max(initial=0)), "baseline": int(tor.backlog.max(initial=0))},
    }
    (out / "comparison.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
        print(f"latency ratio baseline/predictor: {fmt(table['latency_ratio'])}")
        print(f"jain index  predictor {fmt(table['jain_index']['predictor'])}  baseline {fmt(table['jain_index']['baseline'])}")
    return status


def cmd_fairness(args) -> int:
    sc = load_scenario(args.scenario)
    topo = sc.topology
    r_max = args.r_max if args.r_max is not None else sc.controller.r_max
    problem = FairnessProblem(topo, r_max=r_max)
    if not problem.bound_ok():
        print(
            f"warning: r_max={r_max:g} is below the largest node capacity {min_r_max(topo):g}; "
            "the QP optimum may not be max-min fair",
            file=sys.stderr,
        )
    qp_sol = solve_maxmin_qp(problem)
    wf = water_filling(problem)
    a, b = np.array(qp_sol.rates.as_list()), np.array(wf.as_list())
    diff = float(np.max(np.abs(a - b), initial=0.0))
    ok_qp, ok_wf = verify_maxmin(qp_sol.rates, topo), verify_maxmin(wf, topo)
    if not args.quiet:
        print("qp rates:            " + " ".join(f"{v:.6g}" for v in a))
        print("water-filling rates: " + " ".join(f"{v:.6g}" for v in b))
        print(f"max abs difference:  {diff:.3g}")
        print(f"max-min fair: qp {'yes' if ok_qp else 'no'}, water-filling {'yes' if ok_wf else 'no'}")
    return 0


def cmd_selftest(args) -> int:
    try:
        import pytest
    except ImportError:
        print("selftest needs pytest and hypothesis (pip install .[test])", file=sys.stderr)
        return 2
    tests = Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print(f"test suite not found at {tests}", file=sys.stderr)
        return 2
    opts = [str(tests), "-m", "property"]
    if args.quiet:
        opts.append("-q")
    return int(pytest.main(opts))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="predictor", description="Predictive congestion control for relay overlays.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
        if out:
            p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("run", help="simulate one scenario")
    common(p)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run under both policies and compare")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fairness", help="max-min rates of a scenario topology by two methods")
    common(p, out=False)
    p.add_argument("--r-max", type=float, dest="r_max")
    p.set_defaults(func=cmd_fairness)

    p = sub.add_parser("selftest", help="run the property test suites")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "quiet", False))
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, FairnessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
