"""Synthetic open-loop example for the middle relay of the three-relay topology.

A single controller solve on hand-made neighbour trajectories, plus a checker
for the nine behaviours the plan is expected to show:

1. step-0 outgoing rates are capped by the successor's delayed allowance and
   step-0 intake equals what the predecessor already sent
2. circuit 0's intake drains the estimated predecessor queue to exactly zero
3. all circuits get the same first-step outgoing rate
4. circuit 0's outgoing rate falls monotonically to zero as its queue empties
5. circuit 0's incoming rate has vanished before its outgoing rate does
6. afterwards circuit 1's outgoing rate drops to exactly its incoming rate
7. the per-circuit outgoing caps hold at every step and bind somewhere
8. incoming rates respect the node capacity at every step
9. outgoing rates respect the node capacity at every step
"""

from __future__ import annotations

import numpy as np

from .ocp import ControllerConfig, ControllerInputs, OcpSolution, shift_trajectory, solve_node_step

TOL = 1e-6


def central_node_example(horizon: int = 20, capacity: float = 300.0) -> tuple[ControllerConfig, ControllerInputs]:
    """Three circuits through one node.

    Circuit 0's predecessor stops sending after three steps and holds a small
    backlog; circuit 1 trickles in at 60 packets/s with an initial local queue;
    circuit 2 has plenty of data upstream and a successor that throttles it for
    a few steps. The successor's delayed allowance for step 0 is the fair share.
    """
    N, C = horizon, capacity
    cfg = ControllerConfig(horizon=N, dt=0.04, d0=1.0 / 3.0, r_max=C, queue_limit=50.0)
    k = np.arange(N)
    r_beta = np.zeros((3, N))
    s_beta = np.zeros((3, N))
    r_beta[0] = np.where(k < 3, C / 3.0, 0.0)
    s_beta[0] = 3.0
    r_beta[1] = 0.2 * C
    r_beta[2] = C - r_beta[0, 0] - r_beta[1, 0]
    s_beta[2] = 40.0 + 4.0 * k
    succ = np.full((3, N), C)
    succ[:, :2] = C / 3.0
    succ[2, 8:12] = 0.4 * C
    inputs = ControllerInputs(
        s_init=[6.0, 10.0, 30.0],
        pred_out_rate=r_beta,
        pred_queue=s_beta,
        succ_in_rate=succ,
        capacity_in=C,
        capacity_out=C,
        committed=r_beta[:, 0].copy(),
    )
    return cfg, inputs


def solve_example(horizon: int = 20, capacity: float = 300.0):
    cfg, inputs = central_node_example(horizon, capacity)
    return cfg, inputs, solve_node_step(cfg, inputs, node="M", step=0)


def _first(mask) -> int | None:
    idx = np.flatnonzero(mask)
    return int(idx[0]) if idx.size else None


def check_observations(cfg: ControllerConfig, inputs: ControllerInputs, sol: OcpSolution, tol: float = TOL) -> dict[int, bool]:
    r_in, r_out, s = sol.r_in, sol.r_out, sol.s_pred
    grant = np.clip(shift_trajectory(inputs.succ_in_rate, 1), 0.0, cfg.r_max)
    s_tilde = inputs.pred_queue - sol.delta_s[:, 1:]
    out: dict[int, bool] = {}

    pinned = np.isfinite(inputs.committed) if inputs.committed is not None else np.zeros(inputs.circuits, bool)
    out[1] = bool(
        np.all(r_out[:, 0] <= grant[:, 0] + tol)
        and np.all(np.abs(r_in[pinned, 0] - inputs.committed[pinned]) <= tol)
    )

    k2 = _first(np.abs(s_tilde[0]) <= tol)
    out[2] = bool(np.all(s_tilde >= -tol) and k2 is not None and np.all(np.abs(s_tilde[0, k2:]) <= tol))

    out[3] = bool(np.ptp(r_out[:, 0]) <= tol)

    # queue of circuit i first empty after step z_i, i.e. s_pred[i, z_i + 1] == 0
    z0 = _first(s[0, 1:] <= tol)
    z1 = _first(s[1, 1:] <= tol)
    ok4 = z0 is not None and np.all(np.diff(r_out[0, : z0 + 2]) <= tol) and np.all(r_out[0, z0 + 1 :] <= tol)
    out[4] = bool(ok4 and r_out[0, 0] - r_out[0, z0] > tol)

    k5 = _first(r_in[0] <= tol)
    out[5] = bool(z0 is not None and k5 is not None and k5 <= z0 and np.all(r_in[0, k5:] <= tol))

    if z0 is None or z1 is None or z1 <= z0:
        out[6] = False
    else:
        w = slice(z1 + 1, min(z1 + 6, cfg.horizon))
        out[6] = bool(
            np.all(np.abs(r_out[1, w] - r_in[1, w]) <= tol) and np.all(r_out[1, : z1 + 1] > r_in[1, : z1 + 1] + tol)
        )

    capped = grant < cfg.r_max - tol
    out[7] = bool(np.all(r_out <= grant + tol) and np.any(capped & (np.abs(r_out - grant) <= tol)))

    c_in = np.full(cfg.horizon, inputs.capacity_in)
    if inputs.committed is not None:
        c_in[0] = max(c_in[0], float(np.nansum(inputs.committed)))
    out[8] = bool(np.all(r_in.sum(axis=0) <= c_in + tol) and c_in[0] <= inputs.capacity_in + tol)
    out[9] = bool(np.all(r_out.sum(axis=0) <= inputs.capacity_out + tol))
    return out
