"""Deterministic step-driven overlay simulator.

Time advances in ticks of the control period ``dt``. Each tick, sources
emit into per-circuit source buffers, then every relay is visited in
topological order and

1. reads the control messages delivered to it,
2. solves its control problem (or runs the greedy baseline),
3. admits source data (entry relays) and accepts packets forwarded to it
   this tick by its predecessors,
4. forwards packets through per-circuit token buckets,
5. emits control messages.

A packet forwarded by a relay reaches its successor within the same tick;
link propagation is charged to the packet's latency instead of holding it
in flight, so the queue dynamics match the controller's model exactly.
Queues are sampled at the end of each tick.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import exchange
from .exchange import Envelope, MessageLogEntry
from .model import NetworkTopology, SourceModel, TopologyError
from .qp import kkt_residuals
from .ocp import ControllerConfig, ControllerInputs, OcpError, OcpSolution, shift_trajectory, solve_node_step
from .scenario import Scenario

logger = logging.getLogger(__name__)

_EPS = 1e-9


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# sources and shaping


def source_emit(model: SourceModel, t0: float, t1: float) -> float:
    """Packets offered by ``model`` during ``[t0, t1)``."""
    if t1 <= t0:
        return 0.0
    if model.kind == "infinite":
        return model.rate * (t1 - t0)
    total = 0.0
    for start, stop in model.windows:
        lo, hi = max(t0, start), min(t1, stop)
        if hi > lo:
            total += model.rate * (hi - lo)
    return total


@dataclass
class TokenBucket:
    rate: float = 0.0
    tokens: float = 0.0

    def capacity(self, dt: float) -> float:
        # at least two whole packets, so rates below one packet per tick still send in full
        if self.rate <= 0:
            return 0.0
        return max(2.0 * self.rate * dt, 2.0)


def token_bucket_forward(bucket: TokenBucket, queue: int, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    bucket.tokens = min(bucket.tokens + bucket.rate * dt, bucket.capacity(dt))
    n = min(int(math.floor(bucket.tokens + _EPS)), int(queue))
    n = max(n, 0)
    bucket.tokens = max(bucket.tokens - n, 0.0)
    return n


def _budget_cap(rate: float, dt: float) -> float:
    return TokenBucket(rate).capacity(dt)


def round_robin(queues: list[int], budget: int, start: int) -> list[int]:
    """Split ``budget`` packets over ``queues`` in round-robin order from ``start``."""
    p = len(queues)
    out = [0] * p
    left = [int(q) for q in queues]
    order = [(start + j) % p for j in range(p)]
    while budget > 0:
        active = [i for i in order if left[i] > 0]
        if not active:
            break
        share = budget // len(active)
        if share == 0:
            for i in active[:budget]:
                out[i] += 1
                left[i] -= 1
            break
        for i in active:
            n = min(share, left[i])
            out[i] += n
            left[i] -= n
            budget -= n
    return out


def baseline_step(queues: list[int], budget: int, start: int) -> list[int]:
    """Greedy forwarding decision for one relay and tick."""
    return round_robin(queues, budget, start)


# ---------------------------------------------------------------------------
# packet storage


class PacketQueue:
    """FIFO of packet batches ``[first_seq, count, enter_step]``."""

    __slots__ = ("batches", "length")

    def __init__(self):
        self.batches: deque[list[int]] = deque()
        self.length = 0

    def push(self, batches):
        for b in batches:
            if b[1] <= 0:
                continue
            last = self.batches[-1] if self.batches else None
            if last is not None and last[2] == b[2] and last[0] + last[1] == b[0]:
                last[1] += b[1]
            else:
                self.batches.append(list(b))
            self.length += b[1]

    def pop(self, n: int) -> list[list[int]]:
        out = []
        while n > 0 and self.batches:
            b = self.batches[0]
            take = min(n, b[1])
            out.append([b[0], take, b[2]])
            b[0] += take
            b[1] -= take
            n -= take
            self.length -= take
            if b[1] == 0:
                self.batches.popleft()
        return out

    def drop_tail(self, n: int) -> int:
        dropped = 0
        while n > 0 and self.batches:
            b = self.batches[-1]
            take = min(n, b[1])
            b[1] -= take
            n -= take
            dropped += take
            self.length -= take
            if b[1] == 0:
                self.batches.pop()
        return dropped


# ---------------------------------------------------------------------------
# trace


@dataclass
class SolverLogEntry:
    node: str
    step: int
    objective: float
    iterations: int
    wall_time: float
    stationarity: float
    primal: float
    dual: float
    complementarity: float
    warm_started: bool
    circuits: int


@dataclass
class SimTrace:
    """Everything recorded during a run.

    Arrays are indexed ``[step, ...]``; node axes follow ``node_ids`` and
    circuit axes follow circuit ids. ``deliveries`` rows are
    ``(circuit, first_seq, count, enter_step, leave_step)``.
    """

    scenario: str
    policy: str
    dt: float
    node_ids: list[str]
    path_delay: np.ndarray
    queue_limit: np.ndarray
    on_path: np.ndarray  # (nodes, circuits) bool
    offered: np.ndarray  # (steps, circuits) packets generated by sources
    source_discards: np.ndarray  # (steps, circuits)
    source_buffer: np.ndarray  # (steps, circuits) end of step
    entered: np.ndarray  # (steps, circuits)
    delivered: np.ndarray  # (steps, circuits)
    drops: np.ndarray  # (steps, nodes, circuits) in-network drops
    queue: np.ndarray  # (steps, nodes, circuits) end of step
    sent: np.ndarray  # (steps, nodes, circuits) packets forwarded
    deliveries: np.ndarray
    messages: list[MessageLogEntry] = field(default_factory=list)
    solver_log: list[SolverLogEntry] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    cell_bytes: int = 512

    @property
    def steps(self) -> int:
        return self.offered.shape[0]

    @property
    def circuits(self) -> int:
        return self.offered.shape[1]

    def enter_times(self) -> np.ndarray:
        return self.deliveries[:, 3] * self.dt

    def leave_times(self) -> np.ndarray:
        c = self.deliveries[:, 0]
        return self.deliveries[:, 4] * self.dt + self.path_delay[c] if c.size else np.zeros(0)

    def backlog(self) -> np.ndarray:
        return self.queue.sum(axis=(1, 2))


# ---------------------------------------------------------------------------
# engine


def topological_nodes(t: NetworkTopology) -> list[str]:
    order = t.node_ids
    edges = {n: set() for n in order}
    indeg = {n: 0 for n in order}
    for c in t.circuits:
        for a, b in zip(c.path, c.path[1:]):
            if b not in edges[a]:
                edges[a].add(b)
                indeg[b] += 1
    ready = [n for n in order if indeg[n] == 0]
    out = []
    while ready:
        n = ready.pop(0)
        out.append(n)
        for m in sorted(edges[n], key=order.index):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
                ready.sort(key=order.index)
    if len(out) != len(order):
        raise TopologyError("circuit hops form a cycle between relays; same-tick forwarding needs an acyclic relay graph")
    return out


class _Node:
    def __init__(self, spec, circuits, cfg: ControllerConfig, seed_offset: int):
        self.spec = spec
        self.circuits = circuits  # sorted circuit ids
        self.cfg = cfg
        self.queues = {c: PacketQueue() for c in circuits}
        self.arrivals = {c: [] for c in circuits}
        self.out_bucket = {c: TokenBucket() for c in circuits}
        self.in_bucket = {c: TokenBucket() for c in circuits}
        self.last_down: dict[str, exchange.DownstreamMsg] = {}
        self.last_up: dict[str, exchange.UpstreamMsg] = {}
        self.plan: OcpSolution | None = None
        self.rr = seed_offset
        self.budget_out = 0.0
        self.budget_in = 0.0


def _row(msg, cid):
    try:
        return msg.row(cid)
    except ValueError:
        return None


def run(scenario: Scenario) -> SimTrace:
    t = scenario.topology
    cfg = scenario.controller
    dt = cfg.dt
    steps = scenario.steps
    p = len(t.circuits)
    node_ids = t.node_ids
    n_nodes = len(node_ids)
    nidx = {n: i for i, n in enumerate(node_ids)}
    order = topological_nodes(t)
    rng = np.random.default_rng(scenario.seed)
    baseline = scenario.policy == "baseline"

    nodes: dict[str, _Node] = {}
    for spec in t.nodes:
        node_cfg = dataclasses.replace(cfg, queue_limit=spec.queue_limit)
        cs = t.circuits_at(spec.id)
        nodes[spec.id] = _Node(spec, cs, node_cfg, int(rng.integers(0, max(len(cs), 1))))

    on_path = np.zeros((n_nodes, p), dtype=bool)
    for c in t.circuits:
        for h in c.path:
            on_path[nidx[h], c.id] = True
    trace = SimTrace(
        scenario=scenario.name,
        policy=scenario.policy,
        dt=dt,
        node_ids=list(node_ids),
        path_delay=np.array([t.path_delay(c.id) for c in t.circuits]),
        queue_limit=np.array(
            [scenario.baseline_queue_limit if baseline else n.queue_limit for n in t.nodes], dtype=float
        ),
        on_path=on_path,
        offered=np.zeros((steps, p), dtype=np.int64),
        source_discards=np.zeros((steps, p), dtype=np.int64),
        source_buffer=np.zeros((steps, p), dtype=np.int64),
        entered=np.zeros((steps, p), dtype=np.int64),
        delivered=np.zeros((steps, p), dtype=np.int64),
        drops=np.zeros((steps, n_nodes, p), dtype=np.int64),
        queue=np.zeros((steps, n_nodes, p), dtype=np.int64),
        sent=np.zeros((steps, n_nodes, p), dtype=np.int64),
        deliveries=np.zeros((0, 5), dtype=np.int64),
        cell_bytes=scenario.cell_bytes,
    )
    deliveries: list[tuple[int, int, int, int, int]] = []
    src_acc = np.zeros(p)
    src_buf = np.zeros(p, dtype=np.int64)
    next_seq = np.zeros(p, dtype=np.int64)
    pending: list[Envelope] = []
    N = cfg.horizon

    for k in range(steps):
        t0, t1 = k * dt, (k + 1) * dt
        for c in t.circuits:
            src_acc[c.id] += source_emit(c.source, t0, t1)
            gen = int(math.floor(src_acc[c.id] + _EPS))
            src_acc[c.id] -= gen
            trace.offered[k, c.id] = gen
            src_buf[c.id] += gen
            cap = int(math.floor(c.source.backlog_cap + _EPS))
            if src_buf[c.id] > cap:
                trace.source_discards[k, c.id] = src_buf[c.id] - cap
                src_buf[c.id] = cap

        for nid in order:
            node = nodes[nid]
            ni = nidx[nid]
            cs = node.circuits
            if not cs:
                continue
            mine = [e for e in pending if e.receiver == nid]
            if mine:
                pending = [e for e in pending if e.receiver != nid]
                inbox, later = exchange.deliver(mine, k)
                pending.extend(later)
                for env in inbox.get(nid, []):
                    if env.direction == exchange.DOWN:
                        node.last_down[env.msg.sender] = env.msg
                    else:
                        node.last_up[env.msg.sender] = env.msg

            if baseline:
                _baseline_tick(node, t, k, dt, src_buf, next_seq, trace, ni, scenario, deliveries, nodes)
                continue

            s_init = np.array([node.queues[c].length for c in cs], dtype=float)
            pred_out = np.zeros((len(cs), N))
            pred_q = np.zeros((len(cs), N))
            succ_in = np.zeros((len(cs), N))
            committed = np.full(len(cs), np.nan)
            for r, cid in enumerate(cs):
                circ = t.circuits[cid]
                b = t.predecessor(cid, nid)
                if b is None:
                    rate = circ.source.rate if circ.source.active(t0) else 0.0
                    pred_out[r] = rate
                    pred_q[r] = float(src_buf[cid])
                else:
                    msg = node.last_down.get(b)
                    row = _row(msg, cid) if msg is not None else None
                    if row is not None:
                        age = k - msg.step
                        pred_out[r] = shift_trajectory(msg.r_out[row], age)
                        pred_q[r] = shift_trajectory(msg.s_queue[row], age)
                    arrived = sum(batch[1] for batch in node.arrivals[cid])
                    committed[r] = arrived / dt
                    # what actually left the predecessor this tick
                    pred_out[r, 0] = committed[r]
                g = t.successor(cid, nid)
                if g is None:
                    succ_in[r] = node.spec.capacity_out
                else:
                    msg = node.last_up.get(g)
                    row = _row(msg, cid) if msg is not None else None
                    if row is not None:
                        age = k - msg.step
                        succ_in[r] = shift_trajectory(msg.r_in[row], age - 1)
            inputs = ControllerInputs(
                s_init=s_init,
                pred_out_rate=pred_out,
                pred_queue=pred_q,
                succ_in_rate=succ_in,
                capacity_in=node.spec.capacity_in,
                capacity_out=node.spec.capacity_out,
                committed=committed if np.any(np.isfinite(committed)) else None,
            )
            tic = time.perf_counter()
            try:
                plan = solve_node_step(node.cfg, inputs, warm_start=node.plan, node=nid, step=k)
            except OcpError as exc:
                raise SimulationError(f"{scenario.name}: {exc}") from exc
            wall = time.perf_counter() - tic
            res = kkt_residuals(plan.instance, plan.qp_solution)
            trace.solver_log.append(
                SolverLogEntry(
                    node=nid,
                    step=k,
                    objective=plan.objective,
                    iterations=plan.qp_solution.iterations,
                    wall_time=wall,
                    stationarity=res.stationarity,
                    primal=res.primal,
                    dual=res.dual,
                    complementarity=res.complementarity,
                    warm_started=plan.qp_solution.warm_started,
                    circuits=len(cs),
                )
            )
            node.plan = plan

            for r, cid in enumerate(cs):
                q = node.queues[cid]
                admitted = 0
                if t.predecessor(cid, nid) is None:
                    bucket = node.in_bucket[cid]
                    bucket.rate = plan.r_in[r, 0]
                    n = token_bucket_forward(bucket, int(src_buf[cid]), dt)
                    if n:
                        q.push([[int(next_seq[cid]), n, k]])
                        next_seq[cid] += n
                        src_buf[cid] -= n
                        trace.entered[k, cid] += n
                        admitted = n
                else:
                    q.push(node.arrivals[cid])
                node.arrivals[cid] = []
                bucket = node.out_bucket[cid]
                bucket.rate = plan.r_out[r, 0]
                n = token_bucket_forward(bucket, q.length, dt)
                _forward(node, cid, q.pop(n), n, t, k, trace, ni, deliveries, nodes)
                excess = min(q.length - int(math.floor(node.spec.queue_limit + _EPS)), admitted)
                if excess > 0:
                    # whole-packet rounding overshot the local limit: hand the newest packets back to the source
                    q.drop_tail(excess)
                    next_seq[cid] -= excess
                    src_buf[cid] += excess
                    trace.entered[k, cid] -= excess
                    node.in_bucket[cid].tokens += excess

            for env in exchange.emit_messages(nid, cs, plan, k, t):
                trace.messages.append(exchange.log_entry(env))
                pending.append(env)

        for nid in node_ids:
            node = nodes[nid]
            ni = nidx[nid]
            for cid in node.circuits:
                length = node.queues[cid].length
                trace.queue[k, ni, cid] = length
                if not baseline and length > node.spec.queue_limit + 1e-6:
                    trace.violations.append(
                        f"step {k}: queue of circuit {cid} at {nid} is {length} > limit {node.spec.queue_limit:g}"
                    )
        trace.source_buffer[k] = src_buf

    trace.deliveries = np.array(deliveries, dtype=np.int64).reshape(-1, 5)
    for v in trace.violations[:5]:
        logger.warning(v)
    return trace


def _forward(node, cid, batches, n, t, k, trace, ni, deliveries, nodes):
    trace.sent[k, ni, cid] = n
    if not n:
        return
    g = t.successor(cid, node.spec.id)
    if g is None:
        for seq, cnt, enter in batches:
            deliveries.append((cid, seq, cnt, enter, k))
        trace.delivered[k, cid] += n
    else:
        nodes[g].arrivals[cid].extend(batches)


def _baseline_tick(node, t, k, dt, src_buf, next_seq, trace, ni, scenario, deliveries, nodes):
    cs = node.circuits
    nid = node.spec.id
    cap = scenario.baseline_queue_limit
    entry = [c for c in cs if t.predecessor(c, nid) is None]
    if entry:
        node.budget_in = min(node.budget_in + node.spec.capacity_in * dt, _budget_cap(node.spec.capacity_in, dt))
        budget = int(math.floor(node.budget_in + _EPS))
        take = round_robin([int(src_buf[c]) for c in entry], budget, node.rr)
        node.budget_in -= sum(take)
        for c, n in zip(entry, take):
            if n:
                node.queues[c].push([[int(next_seq[c]), n, k]])
                next_seq[c] += n
                src_buf[c] -= n
                trace.entered[k, c] += n
    for c in cs:
        q = node.queues[c]
        q.push(node.arrivals[c])
        node.arrivals[c] = []
        if q.length > cap:
            trace.drops[k, ni, c] += q.drop_tail(q.length - cap)
    node.budget_out = min(node.budget_out + node.spec.capacity_out * dt, _budget_cap(node.spec.capacity_out, dt))
    budget = int(math.floor(node.budget_out + _EPS))
    send = baseline_step([node.queues[c].length for c in cs], budget, node.rr)
    node.budget_out -= sum(send)
    node.rr = (node.rr + 1) % len(cs)
    for c, n in zip(cs, send):
        _forward(node, c, node.queues[c].pop(n), n, t, k, trace, ni, deliveries, nodes)
