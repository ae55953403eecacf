"""Evaluation quantities computed from a finished simulation trace."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simulator import SimTrace

BIN_MS = 10.0
TRANSIENT_S = 2.0


class MetricsError(ValueError):
    pass


def jain_index(x) -> float:
    """Jain's fairness index ``(sum x)^2 / (p sum x^2)``, in ``(0, 1]``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise MetricsError("jain index needs at least one value")
    if np.any(x < 0):
        raise MetricsError("jain index needs nonnegative values")
    sq = float(np.sum(x * x))
    if sq == 0.0:
        raise MetricsError("jain index is undefined for an all-zero allocation")
    return float(np.sum(x)) ** 2 / (x.size * sq)


@dataclass
class RunMetrics:
    scenario: str
    policy: str
    dt: float
    duration: float
    mean_latency_ms: np.ndarray  # per circuit, NaN where nothing was delivered
    overall_latency_ms: float
    hist_edges_ms: np.ndarray
    hist_counts: np.ndarray  # (bins, circuits)
    delivered: np.ndarray  # per circuit, whole run
    steady_throughput: np.ndarray  # packets/s per circuit after the transient
    backlog: np.ndarray  # per step, total over nodes and circuits
    jain: float | None
    control_bytes: int
    data_bytes: int
    overhead_pct: float
    drops: np.ndarray  # in-network drops per circuit
    source_discards: np.ndarray
    violations: int

    @property
    def circuits(self) -> int:
        return self.delivered.size

    def hist_mean_ms(self) -> float:
        """Mean latency from bin midpoints."""
        mid = 0.5 * (self.hist_edges_ms[:-1] + self.hist_edges_ms[1:])
        tot = self.hist_counts.sum(axis=1)
        n = tot.sum()
        return float(mid @ tot / n) if n else float("nan")


def packet_latencies(trace: SimTrace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per delivery batch: ``(circuit, latency seconds, packet count)``."""
    d = trace.deliveries
    if d.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0), np.zeros(0, dtype=np.int64)
    lat = trace.leave_times() - trace.enter_times()
    return d[:, 0], lat, d[:, 2]


def latency_histogram(circuit, lat_ms, count, circuits: int, bin_ms: float = BIN_MS):
    top = float(np.max(lat_ms, initial=0.0))
    nb = int(np.floor(top / bin_ms + 1e-9)) + 1
    edges = np.arange(nb + 1) * bin_ms
    idx = np.minimum(np.floor(lat_ms / bin_ms + 1e-9).astype(int), nb - 1)
    counts = np.zeros((nb, circuits), dtype=np.int64)
    np.add.at(counts, (idx, circuit), count)
    return edges, counts


def control_bytes(trace: SimTrace) -> int:
    return int(sum(m.size for m in trace.messages))


def replay_backlog(trace: SimTrace) -> np.ndarray:
    """Total backlog per step rebuilt from flows: admitted minus delivered minus dropped.

    Independent of the queue samples; packets on links are never counted as
    queued because forwarding is instantaneous within a tick.
    """
    inflow = np.cumsum(trace.entered.sum(axis=1))
    out = np.cumsum(trace.delivered.sum(axis=1) + trace.drops.sum(axis=(1, 2)))
    return inflow - out


def compute(trace: SimTrace, transient: float = TRANSIENT_S) -> RunMetrics:
    p = trace.circuits
    circuit, lat, count = packet_latencies(trace)
    lat_ms = lat * 1e3
    edges, counts = latency_histogram(circuit, lat_ms, count, p)
    delivered = np.bincount(circuit, weights=count, minlength=p).astype(np.int64) if p else np.zeros(0, np.int64)
    wsum = np.bincount(circuit, weights=lat_ms * count, minlength=p) if p else np.zeros(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_lat = np.where(delivered > 0, wsum / np.maximum(delivered, 1), np.nan)
    total = int(delivered.sum())
    overall = float(wsum.sum() / total) if total else float("nan")

    duration = trace.steps * trace.dt
    k0 = min(int(round(transient / trace.dt)), trace.steps)
    span = (trace.steps - k0) * trace.dt
    steady = trace.delivered[k0:].sum(axis=0) / span if span > 0 else np.zeros(p)

    # circuits that never offered anything take no part in the fairness index
    active = trace.offered.sum(axis=0) > 0
    jain = jain_index(steady[active]) if np.any(steady[active] > 0) else None

    cb = control_bytes(trace)
    db = total * trace.cell_bytes
    overhead = 100.0 * cb / (cb + db) if cb + db else 0.0
    return RunMetrics(
        scenario=trace.scenario,
        policy=trace.policy,
        dt=trace.dt,
        duration=duration,
        mean_latency_ms=mean_lat,
        overall_latency_ms=overall,
        hist_edges_ms=edges,
        hist_counts=counts,
        delivered=delivered,
        steady_throughput=steady,
        backlog=trace.backlog(),
        jain=jain,
        control_bytes=cb,
        data_bytes=db,
        overhead_pct=overhead,
        drops=trace.drops.sum(axis=(0, 1)),
        source_discards=trace.source_discards.sum(axis=0),
        violations=len(trace.violations),
    )


def steady_rates(trace: SimTrace, node: str, transient: float = TRANSIENT_S) -> np.ndarray:
    """Mean outgoing rate per circuit at ``node`` after the transient, packets/s."""
    ni = trace.node_ids.index(node)
    k0 = min(int(round(transient / trace.dt)), trace.steps)
    if k0 >= trace.steps:
        return np.zeros(trace.circuits)
    return trace.sent[k0:, ni].mean(axis=0) / trace.dt
