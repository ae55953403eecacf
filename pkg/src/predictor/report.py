"""Run outputs: CSV series, JSON summaries and optional figures.

CSV and ``summary.json`` depend only on the trace, so identical runs give
byte-identical files. Solver wall times go to ``timing.json`` instead.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .metrics import RunMetrics
from .simulator import SimTrace

CSV_FILES = ("latency_hist.csv", "rates.csv", "backlog.csv")


def _num(v, digits: int = 6):
    if v is None:
        return None
    v = float(v)
    if not math.isfinite(v):
        return None
    return round(v, digits)


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_latency_hist(m: RunMetrics, path: Path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["bin_lo_ms", "bin_hi_ms"] + [f"circuit_{i}" for i in range(m.circuits)] + ["total"])
        for b in range(m.hist_counts.shape[0]):
            row = m.hist_counts[b]
            w.writerow([f"{m.hist_edges_ms[b]:g}", f"{m.hist_edges_ms[b + 1]:g}"] + [int(c) for c in row] + [int(row.sum())])


def write_rates(trace: SimTrace, path: Path) -> None:
    """Long format: one row per step, node and circuit on that node's path."""
    fh, w = _writer(path)
    pairs = [(ni, c) for ni in range(len(trace.node_ids)) for c in range(trace.circuits) if trace.on_path[ni, c]]
    with fh:
        w.writerow(["step", "time_s", "node", "circuit", "out_rate", "queue"])
        for k in range(trace.steps):
            t = f"{k * trace.dt:.6f}"
            for ni, c in pairs:
                w.writerow([k, t, trace.node_ids[ni], c, f"{trace.sent[k, ni, c] / trace.dt:.6f}", int(trace.queue[k, ni, c])])


def write_backlog(trace: SimTrace, path: Path) -> None:
    fh, w = _writer(path)
    per_node = trace.queue.sum(axis=2)
    with fh:
        w.writerow(["step", "time_s", "total"] + list(trace.node_ids))
        for k in range(trace.steps):
            w.writerow([k, f"{k * trace.dt:.6f}", int(per_node[k].sum())] + [int(v) for v in per_node[k]])


def summary_dict(trace: SimTrace, m: RunMetrics) -> dict:
    log = trace.solver_log
    solver = {"solves": len(log)}
    if log:
        solver.update(
            max_stationarity=max(e.stationarity for e in log),
            max_primal=max(e.primal for e in log),
            max_dual=max(e.dual for e in log),
            max_complementarity=max(e.complementarity for e in log),
            median_iterations=float(np.median([e.iterations for e in log])),
            warm_started=sum(e.warm_started for e in log),
        )
    return {
        "scenario": m.scenario,
        "policy": m.policy,
        "dt": m.dt,
        "duration_s": _num(m.duration),
        "circuits": [
            {
                "id": i,
                "mean_latency_ms": _num(m.mean_latency_ms[i]),
                "delivered": int(m.delivered[i]),
                "steady_throughput": _num(m.steady_throughput[i]),
                "in_network_drops": int(m.drops[i]),
                "source_discards": int(m.source_discards[i]),
            }
            for i in range(m.circuits)
        ],
        "mean_latency_ms": _num(m.overall_latency_ms),
        "delivered_total": int(m.delivered.sum()),
        "max_backlog": int(m.backlog.max(initial=0)),
        "mean_backlog": _num(m.backlog.mean()) if m.backlog.size else 0.0,
        "jain_index": _num(m.jain),
        "control_bytes": m.control_bytes,
        "data_bytes": m.data_bytes,
        "overhead_pct": _num(m.overhead_pct),
        "messages": len(trace.messages),
        "violations": m.violations,
        "solver": solver,
    }


def timing_dict(trace: SimTrace, wall_time: float | None = None) -> dict:
    out: dict = {"nodes": {}}
    if wall_time is not None:
        out["run_wall_s"] = wall_time
    for nid in trace.node_ids:
        t = np.array([e.wall_time for e in trace.solver_log if e.node == nid])
        if t.size:
            out["nodes"][nid] = {
                "solves": int(t.size),
                "median_ms": float(np.median(t) * 1e3),
                "p95_ms": float(np.percentile(t, 95) * 1e3),
                "max_ms": float(t.max() * 1e3),
            }
    all_t = np.array([e.wall_time for e in trace.solver_log])
    if all_t.size:
        out["median_ms"] = float(np.median(all_t) * 1e3)
    return out


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run(trace: SimTrace, m: RunMetrics, out_dir, wall_time: float | None = None, figures: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_latency_hist(m, out / "latency_hist.csv")
    write_rates(trace, out / "rates.csv")
    write_backlog(trace, out / "backlog.csv")
    _dump_json(summary_dict(trace, m), out / "summary.json")
    _dump_json(timing_dict(trace, wall_time), out / "timing.json")
    written = [out / f for f in CSV_FILES] + [out / "summary.json", out / "timing.json"]
    if figures:
        written += plot_run(trace, m, out)
    return written


def plot_run(trace: SimTrace, m: RunMetrics, out_dir) -> list[Path]:
    """Render rate, backlog and latency figures next to the CSVs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    t = np.arange(trace.steps) * trace.dt
    paths = []
    meta = {"Software": None}

    # outgoing rate of every circuit at the node carrying the most circuits
    ni = int(np.argmax(trace.on_path.sum(axis=1))) if trace.on_path.size else 0
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for c in range(trace.circuits):
        if trace.on_path[ni, c]:
            ax.plot(t, trace.sent[:, ni, c] / trace.dt, lw=1.0, label=f"circuit {c}")
    ax.set_xlabel("time [s]")
    ax.set_ylabel(f"outgoing rate at {trace.node_ids[ni] if trace.node_ids else '-'} [pkt/s]")
    if trace.circuits:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    paths.append(out / "rates.png")
    fig.savefig(paths[-1], dpi=120, metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(t, m.backlog, lw=1.0, color="k")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("backlog [pkt]")
    fig.tight_layout()
    paths.append(out / "backlog.png")
    fig.savefig(paths[-1], dpi=120, metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 3.2))
    if m.hist_counts.size:
        lo = m.hist_edges_ms[:-1]
        ax.bar(lo, m.hist_counts.sum(axis=1), width=np.diff(m.hist_edges_ms), align="edge", color="0.4")
    ax.set_xlabel("latency [ms]")
    ax.set_ylabel("packets")
    fig.tight_layout()
    paths.append(out / "latency_hist.png")
    fig.savefig(paths[-1], dpi=120, metadata=meta)
    plt.close(fig)
    return paths


def format_summary(m: RunMetrics) -> str:
    lines = [f"{m.scenario} [{m.policy}]  {m.duration:g} s simulated"]
    lines.append(f"{'circuit':>8} {'latency ms':>11} {'delivered':>10} {'pkt/s':>9}")
    for i in range(m.circuits):
        lat = m.mean_latency_ms[i]
        lat_s = f"{lat:11.1f}" if math.isfinite(lat) else f"{'-':>11}"
        lines.append(f"{i:>8} {lat_s} {int(m.delivered[i]):>10} {m.steady_throughput[i]:>9.1f}")
    total_lat = f"{m.overall_latency_ms:11.1f}" if math.isfinite(m.overall_latency_ms) else f"{'-':>11}"
    lines.append(f"{'total':>8} {total_lat} {int(m.delivered.sum()):>10} {m.steady_throughput.sum():>9.1f}")
    jain = f"{m.jain:.4f}" if m.jain is not None else "n/a"
    lines.append(f"jain {jain}  overhead {m.overhead_pct:.2f} %  max backlog {int(m.backlog.max(initial=0))}")
    return "\n".join(lines)
