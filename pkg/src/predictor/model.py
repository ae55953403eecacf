"""Overlay network domain types: relays, links, circuits and rate vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class TopologyError(ValueError):
    """Raised when a topology violates one of its structural invariants."""


@dataclass(frozen=True)
class NodeSpec:
    id: str
    capacity_in: float
    capacity_out: float
    queue_limit: float

    @property
    def capacity(self) -> float:
        # single-capacity view used by the feasibility/fairness definitions
        return min(self.capacity_in, self.capacity_out)


@dataclass(frozen=True)
class LinkSpec:
    src: str
    dst: str
    delay: float


@dataclass(frozen=True)
class SourceModel:
    """Traffic offered to the entry relay of one circuit.

    ``kind`` is ``"infinite"`` (always on) or ``"on-off"`` (active only inside
    ``windows``). Offered packets wait in a source buffer bounded by
    ``backlog_cap``; anything beyond it is discarded before entering the
    network.
    """

    kind: str = "infinite"
    rate: float = 0.0
    backlog_cap: float = 100.0
    windows: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("infinite", "on-off"):
            raise TopologyError(f"unknown source kind {self.kind!r}")
        if self.rate < 0:
            raise TopologyError("source rate must be >= 0")
        if self.backlog_cap <= 0:
            raise TopologyError("source backlog_cap must be > 0")
        prev_stop = None
        for start, stop in self.windows:
            if stop <= start:
                raise TopologyError(f"empty source window ({start}, {stop})")
            if prev_stop is not None and start < prev_stop:
                raise TopologyError("source windows must be ordered and non-overlapping")
            prev_stop = stop

    def active(self, t: float) -> bool:
        if self.kind == "infinite":
            return True
        return any(start <= t < stop for start, stop in self.windows)


@dataclass(frozen=True)
class Circuit:
    id: int
    path: tuple[str, ...]
    source: SourceModel = field(default_factory=SourceModel)

    @property
    def entry(self) -> str:
        return self.path[0]

    @property
    def exit(self) -> str:
        return self.path[-1]


@dataclass(frozen=True)
class NetworkTopology:
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]
    circuits: tuple[Circuit, ...]

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def circuits_at(self, node_id: str) -> list[int]:
        """Ids of the circuits traversing ``node_id`` (the set P_alpha), ascending."""
        return [c.id for c in self.circuits if node_id in c.path]

    def link(self, src: str, dst: str) -> LinkSpec:
        for l in self.links:
            if l.src == src and l.dst == dst:
                return l
        raise KeyError((src, dst))

    def path_delay(self, circuit_id: int) -> float:
        """Sum of link delays between the entry and the exit relay of a circuit."""
        path = self.circuits[circuit_id].path
        return sum(self.link(a, b).delay for a, b in zip(path, path[1:]))

    def predecessor(self, circuit_id: int, node_id: str) -> str | None:
        path = self.circuits[circuit_id].path
        i = path.index(node_id)
        return path[i - 1] if i > 0 else None

    def successor(self, circuit_id: int, node_id: str) -> str | None:
        path = self.circuits[circuit_id].path
        i = path.index(node_id)
        return path[i + 1] if i + 1 < len(path) else None


def validate_topology(t: NetworkTopology) -> NetworkTopology:
    """Return ``t`` unchanged, or raise :class:`TopologyError` naming the first broken invariant."""
    ids = set()
    for n in t.nodes:
        if n.id in ids:
            raise TopologyError(f"duplicate node id {n.id!r}")
        ids.add(n.id)
        if not n.capacity_in > 0 or not n.capacity_out > 0:
            raise TopologyError(f"node {n.id!r}: capacities must be > 0")
        if not n.queue_limit > 0:
            raise TopologyError(f"node {n.id!r}: queue_limit must be > 0")

    link_pairs = set()
    for l in t.links:
        for end in (l.src, l.dst):
            if end not in ids:
                raise TopologyError(f"link {l.src}->{l.dst} references unknown node {end!r}")
        if not l.delay > 0:
            raise TopologyError(f"link {l.src}->{l.dst}: delay must be > 0")
        link_pairs.add((l.src, l.dst))

    for idx, c in enumerate(t.circuits):
        if c.id != idx:
            raise TopologyError(f"circuit ids must be dense 0..p-1, got {c.id} at position {idx}")
        if len(c.path) < 1:
            raise TopologyError(f"circuit {c.id}: empty path")
        if len(set(c.path)) != len(c.path):
            raise TopologyError(f"circuit {c.id}: path is not simple")
        for hop in c.path:
            if hop not in ids:
                raise TopologyError(f"circuit {c.id} references unknown node {hop!r}")
        for a, b in zip(c.path, c.path[1:]):
            if (a, b) not in link_pairs:
                raise TopologyError(f"circuit {c.id}: no link {a}->{b} between consecutive hops")
    return t


@dataclass(frozen=True)
class RateVector:
    rates: Mapping[int, float]

    @classmethod
    def from_list(cls, values: Iterable[float]) -> "RateVector":
        return cls({i: float(v) for i, v in enumerate(values)})

    def as_list(self) -> list[float]:
        return [self.rates[i] for i in sorted(self.rates)]

    def __getitem__(self, i: int) -> float:
        return self.rates[i]


def is_feasible(r: RateVector, t: NetworkTopology, tol: float = 0.0) -> bool:
    for c in t.circuits:
        if r[c.id] < -tol:
            return False
    for n in t.nodes:
        load = sum(r[i] for i in t.circuits_at(n.id))
        if load > n.capacity + tol:
            return False
    return True


def total_backlog(states: Iterable[Sequence[float]]) -> float:
    """Packets queued over every node and circuit (data backlog)."""
    b = 0.0
    for queues in states:
        b += sum(queues)
    return b
