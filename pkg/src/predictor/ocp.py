"""Per-node predictive congestion control problem.

Each control step a node chooses, for every circuit it carries, an incoming
and an outgoing rate trajectory over the prediction horizon. Rates are
parameterised by their deficit to ``r_max`` (``r = r_max - dr``) and the
discounted sum of squared deficits is minimised, which pushes rates up while
sharing capacity fairly. Constraints cover queue dynamics, the successor's
allowance, per-node capacities, the local queue limit and the availability
of data at the predecessor.

Variable layout (``p`` circuits, horizon ``N``), each block circuit-major::

    dr_in[i, k]   k = 0..N-1
    dr_out[i, k]  k = 0..N-1
    s[i, k]       queue after step k   (s^1..s^N)
    ds[i, k]      predecessor offset   (ds^1..ds^N)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import qp

logger = logging.getLogger(__name__)


class OcpError(RuntimeError):
    """Solver failure, carrying the node and step for diagnosis."""

    def __init__(self, message: str, node: str | None = None, step: int | None = None, status: str = ""):
        super().__init__(message)
        self.node = node
        self.step = step
        self.status = status


@dataclass(frozen=True)
class ControllerConfig:
    horizon: int = 20
    dt: float = 0.04
    d0: float = 1.0 / 3.0
    r_max: float = 7500.0
    queue_limit: float = 50.0
    # number of leading plan elements bounded by the successor's allowance; 0 = all
    grant_horizon: int = 0

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not 0 < self.d0 <= 1.0 / 3.0 + 1e-12:
            raise ValueError("d0 must lie in (0, 1/3]")
        if not self.r_max > 0:
            raise ValueError("r_max must be > 0")
        if not self.queue_limit > 0:
            raise ValueError("queue_limit must be > 0")
        if self.grant_horizon < 0:
            raise ValueError("grant_horizon must be >= 0")


@dataclass
class ControllerInputs:
    """Measurements and neighbour predictions for one solve.

    Trajectories are arrays of shape ``(circuits, horizon)``. ``pred_queue[:, k]``
    is the predecessor queue after step ``k`` (``s_beta^{k+1}``); ``succ_in_rate``
    is the successor's incoming-rate plan received one step ago and is shifted
    by one element when the problem is built. ``committed`` optionally pins
    the first incoming rate of a circuit (NaN leaves it free); a pinned value
    also replaces the predecessor's first outgoing rate.
    """

    s_init: np.ndarray
    pred_out_rate: np.ndarray
    pred_queue: np.ndarray
    succ_in_rate: np.ndarray
    capacity_in: float
    capacity_out: float
    committed: np.ndarray | None = None

    def __post_init__(self):
        self.s_init = np.asarray(self.s_init, dtype=float).ravel()
        p = self.s_init.size
        for name in ("pred_out_rate", "pred_queue", "succ_in_rate"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if p == 0:
                arr = arr.reshape(0, arr.shape[-1] if arr.size else 0)
            if arr.shape[0] != p:
                raise ValueError(f"{name}: expected {p} circuits, got {arr.shape[0]}")
            if np.any(arr < -1e-9) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: entries must be finite and >= 0")
            setattr(self, name, np.maximum(arr, 0.0))
        if np.any(self.s_init < -1e-9):
            raise ValueError("s_init must be >= 0")
        self.s_init = np.maximum(self.s_init, 0.0)
        if self.committed is not None:
            self.committed = np.asarray(self.committed, dtype=float).ravel()
            if self.committed.size != p:
                raise ValueError("committed must have one entry per circuit")

    @property
    def circuits(self) -> int:
        return self.s_init.size


@dataclass
class OcpSolution:
    r_in: np.ndarray
    r_out: np.ndarray
    s_pred: np.ndarray  # (p, N+1), s_pred[:, 0] = s_init
    delta_s: np.ndarray  # (p, N+1), delta_s[:, 0] = 0
    objective: float
    qp_solution: qp.QpSolution = field(repr=False)
    instance: qp.QpInstance = field(repr=False)

    @property
    def applied_out(self) -> np.ndarray:
        return self.r_out[:, 0]


def discount_sequence(d0: float, n: int) -> np.ndarray:
    if not d0 > 0 or n < 1:
        raise ValueError("need d0 > 0 and n >= 1")
    return d0 ** np.arange(n, dtype=float)


def shift_trajectory(traj: np.ndarray, by: int = 1) -> np.ndarray:
    """Drop the first ``by`` elements and repeat the last one to keep the length."""
    traj = np.asarray(traj, dtype=float)
    L = traj.shape[-1]
    if by <= 0 or L == 0:
        return traj.copy()
    by = min(by, L)
    tail = np.repeat(traj[..., -1:], by, axis=-1)
    return np.concatenate([traj[..., by:], tail], axis=-1)


def _indices(p: int, N: int):
    base = np.arange(p * N).reshape(p, N)
    return base, base + p * N, base + 2 * p * N, base + 3 * p * N


def queue_ceiling(cfg: ControllerConfig, inputs: ControllerInputs) -> np.ndarray:
    """Per-circuit queue upper bound.

    Normally ``queue_limit``; raised when the measured queue plus a committed
    intake already exceeds it, so that the problem stays feasible.
    """
    top = inputs.s_init.copy()
    if inputs.committed is not None:
        top = top + cfg.dt * np.nan_to_num(inputs.committed, nan=0.0)
    return np.maximum(cfg.queue_limit, top)


def build_ocp(cfg: ControllerConfig, inputs: ControllerInputs) -> qp.QpInstance:
    p, N, dt, rmax = inputs.circuits, cfg.horizon, cfg.dt, cfg.r_max
    for name in ("pred_out_rate", "pred_queue", "succ_in_rate"):
        if getattr(inputs, name).shape != (p, N):
            raise ValueError(f"{name}: expected shape {(p, N)}, got {getattr(inputs, name).shape}")
    i_in, i_out, i_s, i_ds = _indices(p, N)
    n = 4 * p * N
    d = discount_sequence(cfg.d0, N)

    P = np.zeros(n)
    P[i_in] = 2.0 * d
    P[i_out] = 2.0 * d

    rows = 2 * p * N + 2 * N
    A = np.zeros((rows, n))
    l = np.zeros(rows)
    u = np.zeros(rows)
    r = 0
    r_pred = np.minimum(inputs.pred_out_rate, rmax)
    if inputs.committed is not None:
        # a committed intake is what already left the predecessor this step
        pinned = np.isfinite(inputs.committed)
        r_pred[pinned, 0] = np.clip(inputs.committed[pinned], 0.0, rmax)
    for i in range(p):
        for k in range(N):
            # s^{k+1} - s^k + dt dr_in^k - dt dr_out^k = 0
            A[r, i_s[i, k]] = 1.0
            if k:
                A[r, i_s[i, k - 1]] = -1.0
            A[r, i_in[i, k]] = dt
            A[r, i_out[i, k]] = -dt
            l[r] = u[r] = inputs.s_init[i] if k == 0 else 0.0
            r += 1
            # ds^{k+1} - ds^k + dt dr_in^k = dt (r_max - r_out_beta^k)
            A[r, i_ds[i, k]] = 1.0
            if k:
                A[r, i_ds[i, k - 1]] = -1.0
            A[r, i_in[i, k]] = dt
            l[r] = u[r] = dt * (rmax - r_pred[i, k])
            r += 1

    c_in = np.full(N, float(inputs.capacity_in))
    if inputs.committed is not None:
        c_in[0] = max(c_in[0], float(np.nansum(inputs.committed)))
    for k in range(N):
        # sum_i (r_max - dr^k) <= C   <=>   sum_i dr^k >= p r_max - C
        A[r, i_in[:, k]] = 1.0
        l[r], u[r] = p * rmax - c_in[k], np.inf
        r += 1
        A[r, i_out[:, k]] = 1.0
        l[r], u[r] = p * rmax - inputs.capacity_out, np.inf
        r += 1

    lb = np.zeros(n)
    ub = np.full(n, rmax)
    grant = np.clip(shift_trajectory(inputs.succ_in_rate, 1), 0.0, rmax)
    if 0 < cfg.grant_horizon < N:
        grant[:, cfg.grant_horizon :] = rmax
    lb[i_out] = rmax - grant
    if inputs.committed is not None:
        pinned = np.flatnonzero(np.isfinite(inputs.committed))
        for i in pinned:
            v = rmax - float(np.clip(inputs.committed[i], 0.0, rmax))
            lb[i_in[i, 0]] = ub[i_in[i, 0]] = v
    lb[i_s] = 0.0
    ub[i_s] = queue_ceiling(cfg, inputs)[:, None]
    lb[i_ds] = -np.inf
    ub[i_ds] = inputs.pred_queue
    return qp.QpInstance(P=P, q=np.zeros(n), A=A, l=l, u=u, lb=lb, ub=ub)


def _unpack(cfg: ControllerConfig, inputs: ControllerInputs, inst, sol) -> OcpSolution:
    p, N = inputs.circuits, cfg.horizon
    i_in, i_out, i_s, i_ds = _indices(p, N)
    x = sol.x
    r_in = np.clip(cfg.r_max - x[i_in], 0.0, None)
    r_out = np.clip(cfg.r_max - x[i_out], 0.0, None)
    s_pred = np.concatenate([inputs.s_init[:, None], x[i_s]], axis=1)
    delta_s = np.concatenate([np.zeros((p, 1)), x[i_ds]], axis=1)
    return OcpSolution(
        r_in=r_in,
        r_out=r_out,
        s_pred=s_pred,
        delta_s=delta_s,
        objective=inst.objective(x),
        qp_solution=sol,
        instance=inst,
    )


def solve_node_step(
    cfg: ControllerConfig,
    inputs: ControllerInputs,
    warm_start: OcpSolution | None = None,
    node: str | None = None,
    step: int | None = None,
) -> OcpSolution:
    inst = build_ocp(cfg, inputs)
    ws = warm_start.qp_solution if warm_start is not None else None
    if ws is not None and ws.x.size != inst.n:
        ws = None
    sol = qp.solve(inst, warm_start=ws)
    if not sol.optimal:
        raise OcpError(
            f"node {node!r} step {step}: OCP solve ended with status {sol.status}",
            node=node,
            step=step,
            status=sol.status,
        )
    return _unpack(cfg, inputs, inst, sol)


def predict_predecessor_queue(s_beta, r_in, r_out_beta, dt: float) -> np.ndarray:
    """Estimated predecessor queue ``s_beta^k - ds^k`` with ``ds^0 = 0``."""
    s_beta = np.asarray(s_beta, dtype=float)
    r_in = np.asarray(r_in, dtype=float)
    r_out_beta = np.asarray(r_out_beta, dtype=float)
    if not (s_beta.shape == r_in.shape == r_out_beta.shape):
        raise ValueError("trajectories must have equal shapes")
    ds = np.zeros_like(s_beta)
    ds[..., 1:] = np.cumsum(dt * (r_in - r_out_beta), axis=-1)[..., :-1]
    return s_beta - ds


def replay_queue(s_init, r_in, r_out, dt: float) -> np.ndarray:
    """Queue trajectory (including the initial value) implied by a rate plan."""
    s_init = np.asarray(s_init, dtype=float)
    steps = dt * (np.asarray(r_in, dtype=float) - np.asarray(r_out, dtype=float))
    return np.concatenate([s_init[..., None], s_init[..., None] + np.cumsum(steps, axis=-1)], axis=-1)


def blocked_inputs(circuits: int, horizon: int, capacity: float) -> ControllerInputs:
    """A node with empty queues, nothing arriving and no successor allowance."""
    z = np.zeros((circuits, horizon))
    return ControllerInputs(
        s_init=np.zeros(circuits),
        pred_out_rate=z,
        pred_queue=z,
        succ_in_rate=z,
        capacity_in=capacity,
        capacity_out=capacity,
    )
