"""Scenario files: topology, sources, controller settings and run options in TOML."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .model import Circuit, LinkSpec, NetworkTopology, NodeSpec, SourceModel, TopologyError, validate_topology
from .ocp import ControllerConfig

POLICIES = ("predictor", "baseline")
BUNDLED = ("fig2_scenario1", "fig2_scenario2", "single_bottleneck", "chain_ab")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: NetworkTopology
    controller: ControllerConfig
    duration: float = 60.0
    policy: str = "predictor"
    seed: int = 0
    cell_bytes: int = 512
    baseline_queue_limit: int = 1000
    description: str = field(default="", compare=False)

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.controller.dt))

    def with_policy(self, policy: str) -> "Scenario":
        if policy not in POLICIES:
            raise ScenarioError(f"policy: expected one of {POLICIES}, got {policy!r}")
        return replace(self, policy=policy)


_TOP = {"name", "description", "duration", "policy", "seed", "cell_bytes", "baseline_queue_limit", "controller", "nodes", "links", "circuits"}
_CONTROLLER = {"dt", "horizon", "d0", "r_max", "s_max", "grant_horizon"}
_NODE = {"id", "capacity_in", "capacity_out", "queue_limit"}
_LINK = {"from", "to", "delay"}
_CIRCUIT = {"id", "path", "source"}
_SOURCE = {"kind", "rate", "backlog_cap", "windows"}


def _check_keys(table: dict, allowed: set, where: str):
    if not isinstance(table, dict):
        raise ScenarioError(f"{where}: expected a table")
    extra = sorted(set(table) - allowed)
    if extra:
        raise ScenarioError(f"{where}: unknown key {extra[0]!r}")


def _get(table: dict, key: str, where: str, kind, default: Any = ...):
    if key not in table:
        if default is ...:
            raise ScenarioError(f"{where}.{key}: missing")
        return default
    v = table[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ScenarioError(f"{where}.{key}: expected a number, got {v!r}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ScenarioError(f"{where}.{key}: expected an integer, got {v!r}")
        return v
    if not isinstance(v, kind):
        raise ScenarioError(f"{where}.{key}: expected {kind.__name__}, got {v!r}")
    return v


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{name}: {exc}") from None
    _check_keys(doc, _TOP, name)

    nodes = []
    for i, raw in enumerate(_get(doc, "nodes", name, list)):
        where = f"nodes[{i}]"
        _check_keys(raw, _NODE, where)
        nodes.append(raw)

    ctrl_raw = _get(doc, "controller", name, dict)
    _check_keys(ctrl_raw, _CONTROLLER, "controller")
    s_max = _get(ctrl_raw, "s_max", "controller", float)

    node_specs = []
    for i, raw in enumerate(nodes):
        where = f"nodes[{i}]"
        node_specs.append(
            NodeSpec(
                id=_get(raw, "id", where, str),
                capacity_in=_get(raw, "capacity_in", where, float),
                capacity_out=_get(raw, "capacity_out", where, float),
                queue_limit=_get(raw, "queue_limit", where, float, s_max),
            )
        )

    links = []
    for i, raw in enumerate(_get(doc, "links", name, list, [])):
        where = f"links[{i}]"
        _check_keys(raw, _LINK, where)
        links.append(LinkSpec(_get(raw, "from", where, str), _get(raw, "to", where, str), _get(raw, "delay", where, float)))

    circuits = []
    for i, raw in enumerate(_get(doc, "circuits", name, list, [])):
        where = f"circuits[{i}]"
        _check_keys(raw, _CIRCUIT, where)
        path = _get(raw, "path", where, list)
        if not all(isinstance(h, str) for h in path):
            raise ScenarioError(f"{where}.path: expected a list of node ids")
        src_raw = _get(raw, "source", where, dict, {})
        _check_keys(src_raw, _SOURCE, f"{where}.source")
        windows = _get(src_raw, "windows", f"{where}.source", list, [])
        try:
            win = tuple((float(a), float(b)) for a, b in windows)
        except (TypeError, ValueError):
            raise ScenarioError(f"{where}.source.windows: expected [[start, stop], ...]") from None
        try:
            source = SourceModel(
                kind=_get(src_raw, "kind", f"{where}.source", str, "infinite"),
                rate=_get(src_raw, "rate", f"{where}.source", float, 0.0),
                backlog_cap=_get(src_raw, "backlog_cap", f"{where}.source", float, 100.0),
                windows=win,
            )
        except TopologyError as exc:
            raise ScenarioError(f"{where}.source: {exc}") from None
        circuits.append(Circuit(id=_get(raw, "id", where, int), path=tuple(path), source=source))

    topo = NetworkTopology(tuple(node_specs), tuple(links), tuple(circuits))
    try:
        validate_topology(topo)
    except TopologyError as exc:
        raise ScenarioError(f"{name}: {exc}") from None

    default_rmax = max((max(n.capacity_in, n.capacity_out) for n in node_specs), default=1.0)
    try:
        controller = ControllerConfig(
            horizon=_get(ctrl_raw, "horizon", "controller", int),
            dt=_get(ctrl_raw, "dt", "controller", float),
            d0=_get(ctrl_raw, "d0", "controller", float),
            r_max=_get(ctrl_raw, "r_max", "controller", float, default_rmax),
            queue_limit=s_max,
            grant_horizon=_get(ctrl_raw, "grant_horizon", "controller", int, 0),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"controller: {exc}") from None

    policy = _get(doc, "policy", name, str, "predictor")
    if policy not in POLICIES:
        raise ScenarioError(f"policy: expected one of {POLICIES}, got {policy!r}")
    duration = _get(doc, "duration", name, float, 60.0)
    if duration < 0:
        raise ScenarioError("duration: must be >= 0")
    cell_bytes = _get(doc, "cell_bytes", name, int, 512)
    if cell_bytes <= 0:
        raise ScenarioError("cell_bytes: must be > 0")
    bq = _get(doc, "baseline_queue_limit", name, int, 1000)
    if bq <= 0:
        raise ScenarioError("baseline_queue_limit: must be > 0")
    return Scenario(
        name=_get(doc, "name", name, str, name),
        topology=topo,
        controller=controller,
        duration=duration,
        policy=policy,
        seed=_get(doc, "seed", name, int, 0),
        cell_bytes=cell_bytes,
        baseline_queue_limit=bq,
        description=_get(doc, "description", name, str, ""),
    )


def load_scenario(path) -> Scenario:
    """Load a scenario from a file path, or a bundled scenario by name."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        text = resources.files("predictor").joinpath("scenarios").joinpath(f"{path}.toml").read_text()
        return parse_scenario(text, name=str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from None
    return parse_scenario(text, name=p.stem)


def scenario_to_dict(s: Scenario) -> dict:
    c = s.controller
    doc: dict[str, Any] = {"name": s.name}
    if s.description:
        doc["description"] = s.description
    doc.update(
        duration=s.duration,
        policy=s.policy,
        seed=s.seed,
        cell_bytes=s.cell_bytes,
        baseline_queue_limit=s.baseline_queue_limit,
        controller={"dt": c.dt, "horizon": c.horizon, "d0": c.d0, "r_max": c.r_max, "s_max": c.queue_limit, "grant_horizon": c.grant_horizon},
        nodes=[
            {"id": n.id, "capacity_in": n.capacity_in, "capacity_out": n.capacity_out, "queue_limit": n.queue_limit}
            for n in s.topology.nodes
        ],
        links=[{"from": l.src, "to": l.dst, "delay": l.delay} for l in s.topology.links],
        circuits=[
            {
                "id": cc.id,
                "path": list(cc.path),
                "source": {
                    "kind": cc.source.kind,
                    "rate": cc.source.rate,
                    "backlog_cap": cc.source.backlog_cap,
                    "windows": [list(w) for w in cc.source.windows],
                },
            }
            for cc in s.topology.circuits
        ],
    )
    return doc


def dump_scenario(s: Scenario) -> str:
    return tomli_w.dumps(scenario_to_dict(s))
