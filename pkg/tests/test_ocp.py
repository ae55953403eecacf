import numpy as np
import pytest
from hypothesis import given, strategies as st

from predictor import qp
from predictor.ocp import (
    ControllerConfig,
    ControllerInputs,
    OcpError,
    blocked_inputs,
    build_ocp,
    discount_sequence,
    predict_predecessor_queue,
    queue_ceiling,
    replay_queue,
    shift_trajectory,
    solve_node_step,
)


def test_discount_sequence():
    np.testing.assert_allclose(discount_sequence(1 / 3, 4), [1, 1 / 3, 1 / 9, 1 / 27])
    np.testing.assert_array_equal(discount_sequence(1.0, 3), [1, 1, 1])
    np.testing.assert_array_equal(discount_sequence(0.5, 1), [1])
    with pytest.raises(ValueError):
        discount_sequence(0.0, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(d0=0.5)
    with pytest.raises(ValueError):
        ControllerConfig(horizon=1)
    with pytest.raises(ValueError):
        ControllerConfig(dt=0.0)
    ControllerConfig(d0=1 / 3)


def test_shift_trajectory():
    np.testing.assert_array_equal(shift_trajectory([1, 2, 3], 1), [2, 3, 3])
    np.testing.assert_array_equal(shift_trajectory([[1, 2, 3]], 2), [[3, 3, 3]])
    np.testing.assert_array_equal(shift_trajectory([1, 2, 3], 0), [1, 2, 3])
    np.testing.assert_array_equal(shift_trajectory([1, 2, 3], 9), [3, 3, 3])


def test_instance_census():
    cfg = ControllerConfig(horizon=2, r_max=10.0)
    inst = build_ocp(cfg, blocked_inputs(1, 2, 10.0))
    # rate deficits in/out plus queue and offset states, two steps each
    assert inst.n == 2 * 2 + 2 * 2
    # two dynamics rows per circuit and step, in/out capacity rows per step
    assert inst.m == 2 * 2 + 2 * 2


def test_dimension_mismatch():
    cfg = ControllerConfig(horizon=4)
    with pytest.raises(ValueError):
        build_ocp(cfg, blocked_inputs(2, 3, 10.0))
    with pytest.raises(ValueError):
        ControllerInputs(np.zeros(2), np.zeros((3, 4)), np.zeros((2, 4)), np.zeros((2, 4)), 1.0, 1.0)


def test_blocked_node():
    cfg = ControllerConfig(horizon=5, r_max=100.0)
    sol = solve_node_step(cfg, blocked_inputs(2, 5, 100.0))
    np.testing.assert_allclose(sol.r_in, 0, atol=1e-9)
    np.testing.assert_allclose(sol.r_out, 0, atol=1e-9)
    d = discount_sequence(cfg.d0, 5)
    assert sol.objective == pytest.approx(2 * 2 * d.sum() * 100.0**2, rel=1e-9)


def test_pass_through_steady_state():
    N, r = 10, 40.0
    cfg = ControllerConfig(horizon=N, r_max=100.0)
    inp = ControllerInputs(
        s_init=[0.0],
        pred_out_rate=np.full((1, N), r),
        pred_queue=np.zeros((1, N)),
        succ_in_rate=np.full((1, N), 100.0),
        capacity_in=100.0,
        capacity_out=100.0,
    )
    sol = solve_node_step(cfg, inp)
    np.testing.assert_allclose(sol.r_in, r, atol=1e-6)
    np.testing.assert_allclose(sol.r_out, r, atol=1e-6)
    np.testing.assert_allclose(replay_queue(inp.s_init, sol.r_in, sol.r_out, cfg.dt), 0.0, atol=1e-9)


def test_symmetric_circuits_share_capacity():
    N, C = 10, 90.0
    cfg = ControllerConfig(horizon=N, r_max=C)
    inp = ControllerInputs(
        s_init=[20.0] * 3,
        pred_out_rate=np.full((3, N), C),
        pred_queue=np.full((3, N), 30.0),
        succ_in_rate=np.full((3, N), C),
        capacity_in=C,
        capacity_out=C,
    )
    sol = solve_node_step(cfg, inp)
    np.testing.assert_allclose(sol.r_out[:, 0], C / 3, atol=1e-6)


def test_urgency_front_loads_sending():
    # a queue with nothing arriving and slack capacity is sent as early as possible
    N = 12
    cfg = ControllerConfig(horizon=N, r_max=300.0)
    inp = ControllerInputs(
        s_init=[10.0],
        pred_out_rate=np.zeros((1, N)),
        pred_queue=np.zeros((1, N)),
        succ_in_rate=np.full((1, N), 300.0),
        capacity_in=300.0,
        capacity_out=300.0,
    )
    sol = solve_node_step(cfg, inp)
    assert np.all(np.diff(sol.r_out[0]) <= 1e-6)
    assert sol.r_out[0, 0] > sol.r_out[0, 1] + 1.0
    assert cfg.dt * sol.r_out.sum() == pytest.approx(10.0, abs=1e-6)


def test_predict_predecessor_queue_example():
    s = predict_predecessor_queue(np.full(3, 10.0), np.full(3, 50.0), np.full(3, 100.0), 0.04)
    np.testing.assert_allclose(s, [10.0, 12.0, 14.0])
    same = predict_predecessor_queue(np.full(4, 5.0), np.full(4, 7.0), np.full(4, 7.0), 0.04)
    np.testing.assert_allclose(same, 5.0)
    with pytest.raises(ValueError):
        predict_predecessor_queue(np.zeros(3), np.zeros(2), np.zeros(3), 0.04)


@pytest.mark.property
@given(seed=st.integers(0, 10**6), n=st.integers(1, 15))
def test_predict_predecessor_queue_recursion(seed, n):
    rng = np.random.default_rng(seed)
    s_b, r_in, r_b = rng.uniform(0, 50, (3, n))
    dt = 0.04
    got = predict_predecessor_queue(s_b, r_in, r_b, dt)
    ds = 0.0
    for k in range(n):
        assert got[k] == pytest.approx(s_b[k] - ds, abs=1e-9)
        ds = ds + dt * (r_in[k] - r_b[k])


def test_solver_failure_carries_context(monkeypatch):
    cfg = ControllerConfig(horizon=3, r_max=10.0)
    failed = qp.QpSolution(x=np.zeros(12), y=np.zeros(10), z=np.zeros(12), status=qp.NUMERICAL_FAILURE, iterations=1)
    monkeypatch.setattr(qp, "solve", lambda *a, **k: failed)
    with pytest.raises(OcpError) as err:
        solve_node_step(cfg, blocked_inputs(1, 3, 10.0), node="R7", step=42)
    assert err.value.node == "R7" and err.value.step == 42
    assert "R7" in str(err.value) and "42" in str(err.value)


@st.composite
def ocp_cases(draw):
    p = draw(st.integers(1, 3))
    N = draw(st.integers(2, 8))
    seed = draw(st.integers(0, 10**6))
    committed = draw(st.booleans())
    rng = np.random.default_rng(seed)
    r_max = 100.0
    cfg = ControllerConfig(horizon=N, r_max=r_max, queue_limit=float(rng.uniform(2, 20)))
    inp = ControllerInputs(
        s_init=rng.uniform(0, 10, p),
        pred_out_rate=rng.uniform(0, 150, (p, N)),
        pred_queue=rng.uniform(0, 10, (p, N)),
        succ_in_rate=rng.uniform(0, 120, (p, N)),
        capacity_in=float(rng.uniform(10, 200)),
        capacity_out=float(rng.uniform(10, 200)),
        committed=rng.uniform(0, 80, p) if committed else None,
    )
    return cfg, inp


@pytest.mark.property
@given(ocp_cases())
def test_plan_satisfies_constraints(case):
    cfg, inp = case
    sol = solve_node_step(cfg, inp)
    tol = 1e-6
    assert qp.kkt_residuals(sol.instance, sol.qp_solution).within()
    # model consistency: the plan replays to its own queue prediction
    np.testing.assert_allclose(replay_queue(inp.s_init, sol.r_in, sol.r_out, cfg.dt), sol.s_pred, atol=1e-6)
    assert np.all(sol.s_pred >= -tol)
    assert np.all(sol.s_pred[:, 1:] <= queue_ceiling(cfg, inp)[:, None] + tol)
    # delayed successor allowance
    grant = np.clip(shift_trajectory(inp.succ_in_rate, 1), 0, cfg.r_max)
    assert np.all(sol.r_out <= grant + tol)
    # availability at the predecessor
    s_tilde = inp.pred_queue - sol.delta_s[:, 1:]
    assert np.all(s_tilde >= -tol)
    r_b = np.minimum(inp.pred_out_rate, cfg.r_max)
    if inp.committed is not None:
        r_b[:, 0] = np.clip(inp.committed, 0, cfg.r_max)
    np.testing.assert_allclose(np.diff(sol.delta_s, axis=1), cfg.dt * (sol.r_in - r_b), atol=1e-6)
    assert np.all(sol.r_out.sum(axis=0)[1:] <= inp.capacity_out + tol)
    assert np.all(sol.r_in.sum(axis=0)[1:] <= inp.capacity_in + tol)
    if inp.committed is not None:
        np.testing.assert_allclose(sol.r_in[:, 0], np.clip(inp.committed, 0, cfg.r_max), atol=1e-6)


@pytest.mark.property
@given(seed=st.integers(0, 10**6), perm=st.permutations(range(3)))
def test_permutation_symmetry(seed, perm):
    rng = np.random.default_rng(seed)
    N = 6
    cfg = ControllerConfig(horizon=N, r_max=100.0)
    base = dict(
        s_init=rng.uniform(0, 10, 3),
        pred_out_rate=rng.uniform(0, 150, (3, N)),
        pred_queue=rng.uniform(0, 10, (3, N)),
        succ_in_rate=rng.uniform(0, 120, (3, N)),
    )
    a = solve_node_step(cfg, ControllerInputs(**base, capacity_in=120.0, capacity_out=120.0))
    perm = list(perm)
    b = solve_node_step(cfg, ControllerInputs(**{k: v[perm] for k, v in base.items()}, capacity_in=120.0, capacity_out=120.0))
    np.testing.assert_allclose(b.r_out, a.r_out[perm], atol=1e-5)
    np.testing.assert_allclose(b.r_in, a.r_in[perm], atol=1e-5)


# cost change when rate deficit m moves from step k to step k+1 on one circuit;
# a = deficit at k, b = deficit at k+1, common factor d^k dropped
def shift_cost(a, b, m, d0):
    return (a - m) ** 2 - a**2 + d0 * ((b + m) ** 2 - b**2)


@pytest.mark.property
@given(a=st.floats(1e-3, 1e3), frac_b=st.floats(0, 1), frac_m=st.floats(1e-6, 1), d0=st.floats(1e-3, 1 / 3))
def test_shift_cost_nonpositive_when_deficits_decrease(a, frac_b, frac_m, d0):
    # with b <= a, postponing never pays for d0 <= 1/3
    b, m = frac_b * a, frac_m * a
    assert shift_cost(a, b, m, d0) <= 1e-9 * a * a


def test_shift_cost_can_be_positive_when_deficits_increase():
    assert shift_cost(1.0, 5.0, 1.0, 1 / 3) == pytest.approx(8 / 3)


def test_shift_cost_matches_objective():
    # direct evaluation on the discounted objective of a plan
    d = discount_sequence(1 / 3, 4)
    plan = np.array([3.0, 2.0, 5.0, 1.0])
    k, m = 1, 0.7
    moved = plan.copy()
    moved[k] -= m
    moved[k + 1] += m
    diff = d @ moved**2 - d @ plan**2
    assert diff == pytest.approx(d[k] * shift_cost(plan[k], plan[k + 1], m, 1 / 3))
