"""Max-min fair rate allocation.

Two independent routes to the same allocation: a least-squares QP over the
rate deficits ``r_max - r`` (:func:`solve_maxmin_qp`), and classical
progressive filling (:func:`water_filling`). :func:`verify_maxmin` checks the
bottleneck characterisation directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import qp
from .model import NetworkTopology, RateVector, is_feasible

logger = logging.getLogger(__name__)

EPS_FAIR = 1e-6


class FairnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class FairnessProblem:
    topology: NetworkTopology
    r_max: float | None = None

    @property
    def rate_cap(self) -> float:
        if self.r_max is not None:
            return float(self.r_max)
        return min_r_max(self.topology)

    def bound_ok(self) -> bool:
        """Whether ``r_max`` is large enough for the QP to be max-min fair."""
        return self.rate_cap >= min_r_max(self.topology)


def min_r_max(t: NetworkTopology) -> float:
    if not t.nodes:
        return 0.0
    return max(max(n.capacity_in, n.capacity_out) for n in t.nodes)


@dataclass
class FairnessSolution:
    rates: RateVector
    objective: float
    residuals: qp.KktResiduals
    qp_solution: qp.QpSolution
    instance: qp.QpInstance


def maxmin_instance(p: FairnessProblem) -> qp.QpInstance:
    t = p.topology
    r_max = p.rate_cap
    n_c = len(t.circuits)
    rows, lower = [], []
    for node in t.nodes:
        members = t.circuits_at(node.id)
        if not members:
            continue
        row = np.zeros(n_c)
        row[members] = 1.0
        rows.append(row)
        # sum(r_max - dr) <= C   <=>   sum(dr) >= |P_a| r_max - C
        lower.append(len(members) * r_max - node.capacity)
    A = np.array(rows) if rows else np.zeros((0, n_c))
    return qp.QpInstance(
        P=np.full(n_c, 2.0),
        q=np.zeros(n_c),
        A=A,
        l=np.array(lower),
        u=np.full(len(rows), np.inf),
        lb=np.zeros(n_c),
        ub=np.full(n_c, r_max),
    )


def solve_maxmin_qp(p: FairnessProblem) -> FairnessSolution:
    if not p.bound_ok():
        logger.warning(
            "r_max=%g is below the largest node capacity %g; the QP optimum need not be max-min fair",
            p.rate_cap,
            min_r_max(p.topology),
        )
    inst = maxmin_instance(p)
    sol = qp.solve(inst)
    if not sol.optimal:
        raise FairnessError(f"fairness QP did not solve: {sol.status}")
    rates = p.rate_cap - sol.x
    res = qp.kkt_residuals(inst, sol)
    return FairnessSolution(
        rates=RateVector.from_list(rates),
        objective=float(np.sum(sol.x**2)),
        residuals=res,
        qp_solution=sol,
        instance=inst,
    )


def water_filling(p: FairnessProblem) -> RateVector:
    """Progressive filling: raise all unfrozen rates together, freeze at saturated nodes."""
    t = p.topology
    cap = p.rate_cap
    n_c = len(t.circuits)
    rates = np.zeros(n_c)
    frozen = np.zeros(n_c, dtype=bool)
    members = {n.id: np.array(t.circuits_at(n.id), dtype=int) for n in t.nodes}
    capacity = {n.id: n.capacity for n in t.nodes}

    while not np.all(frozen):
        best = np.inf
        for node_id, idx in members.items():
            active = idx[~frozen[idx]]
            if active.size == 0:
                continue
            remaining = capacity[node_id] - rates[idx].sum()
            best = min(best, max(remaining, 0.0) / active.size)
        headroom = cap - rates[~frozen].max()
        inc = min(best, headroom)
        rates[~frozen] += inc
        newly = np.zeros(n_c, dtype=bool)
        for node_id, idx in members.items():
            active = idx[~frozen[idx]]
            if active.size == 0:
                continue
            remaining = capacity[node_id] - rates[idx].sum()
            if remaining <= EPS_FAIR * capacity[node_id]:
                newly[active] = True
        if inc >= headroom:
            newly |= ~frozen
        if not np.any(newly):
            # numerical stall; freeze everything that is left
            newly = ~frozen
        frozen |= newly
    return RateVector.from_list(rates)


def bottlenecks(r: RateVector, t: NetworkTopology, eps: float = EPS_FAIR) -> dict[int, list[str]]:
    """For each circuit, the nodes that are a bottleneck for it under ``r``."""
    out: dict[int, list[str]] = {c.id: [] for c in t.circuits}
    for node in t.nodes:
        idx = t.circuits_at(node.id)
        if not idx:
            continue
        tol = eps * node.capacity
        load = sum(r[i] for i in idx)
        if abs(load - node.capacity) > tol:
            continue
        top = max(r[i] for i in idx)
        for i in idx:
            if r[i] >= top - tol:
                out[i].append(node.id)
    return out


def verify_maxmin(r: RateVector, t: NetworkTopology, eps: float = EPS_FAIR) -> bool:
    if not is_feasible(r, t, tol=eps * max((n.capacity for n in t.nodes), default=1.0)):
        return False
    return all(bottlenecks(r, t, eps).values())
