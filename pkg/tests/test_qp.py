import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from predictor import qp


def random_qp(seed, n, m, eq=0, dense_P=True):
    """Feasible by construction: bounds are placed around a known point."""
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n) if dense_P else np.diag(rng.uniform(0.5, 2.0, n))
    q = rng.normal(size=n) * 5
    A = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    Ax = A @ x0
    l = Ax - rng.uniform(0, 2, m)
    u = Ax + rng.uniform(0, 2, m)
    l[rng.random(m) < 0.3] = -np.inf
    u[:eq] = l[:eq] = Ax[:eq]
    lb = x0 - rng.uniform(0, 1, n)
    ub = x0 + rng.uniform(0, 1, n)
    return qp.QpInstance(P=P, q=q, A=A, l=l, u=u, lb=lb, ub=ub)


def oracle(inst):
    cons = []
    for i in range(inst.m):
        a = inst.A[i]
        if inst.l[i] == inst.u[i]:
            cons.append({"type": "eq", "fun": lambda x, a=a, v=inst.l[i]: a @ x - v, "jac": lambda x, a=a: a})
            continue
        if np.isfinite(inst.u[i]):
            cons.append({"type": "ineq", "fun": lambda x, a=a, v=inst.u[i]: v - a @ x, "jac": lambda x, a=a: -a})
        if np.isfinite(inst.l[i]):
            cons.append({"type": "ineq", "fun": lambda x, a=a, v=inst.l[i]: a @ x - v, "jac": lambda x, a=a: a})
    x_start = np.clip(np.zeros(inst.n), inst.lb, inst.ub)
    res = minimize(
        inst.objective,
        x_start,
        jac=lambda x: inst.P @ x + inst.q,
        bounds=list(zip(inst.lb, inst.ub)),
        constraints=cons,
        method="SLSQP",
        options={"ftol": 1e-12, "maxiter": 500},
    )
    return res


@pytest.mark.property
@given(seed=st.integers(0, 10**6), n=st.integers(1, 8), m=st.integers(0, 8), eq=st.integers(0, 2))
def test_matches_independent_solver(seed, n, m, eq):
    inst = random_qp(seed, n, m, eq=min(eq, m, n - 1) if n > 1 else 0)
    sol = qp.solve(inst)
    assert sol.optimal
    assert qp.kkt_residuals(inst, sol).within()
    ref = oracle(inst)
    if ref.success:
        assert sol.objective <= ref.fun + 1e-6 * max(1.0, abs(ref.fun))


@pytest.mark.property
@given(seed=st.integers(0, 10**6))
def test_sparse_and_dense_paths_agree(seed):
    rng = np.random.default_rng(seed)
    n = 120
    P = np.diag(rng.uniform(0.5, 2.0, n))
    q = rng.normal(size=n)
    A = np.zeros((30, n))
    for i in range(30):
        A[i, rng.choice(n, 4, replace=False)] = rng.normal(size=4)
    x0 = rng.normal(size=n)
    inst = qp.QpInstance(P=P, q=q, A=A, l=A @ x0 - 0.5, u=A @ x0 + 0.5, lb=x0 - 1, ub=x0 + 1)
    a = qp.solve(inst, method="sparse")
    b = qp.solve(inst, method="dense")
    assert a.optimal and b.optimal
    assert qp.kkt_residuals(inst, a).within() and qp.kkt_residuals(inst, b).within()
    assert abs(a.objective - b.objective) <= 1e-7 * max(1.0, abs(b.objective))
    np.testing.assert_allclose(a.x, b.x, atol=1e-5)


def test_unconstrained_minimum():
    inst = qp.QpInstance(P=np.diag([2.0, 4.0]), q=np.array([-2.0, -4.0]))
    sol = qp.solve(inst)
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-10)


def test_box_projection():
    # min 1/2|x - c|^2 on a box is the projection of c
    c = np.array([3.0, -2.0, 0.5])
    inst = qp.QpInstance(P=np.eye(3), q=-c, lb=-np.ones(3), ub=np.ones(3))
    sol = qp.solve(inst)
    np.testing.assert_allclose(sol.x, [1.0, -1.0, 0.5], atol=1e-10)
    assert list(sol.bound_state) == [1, -1, 0]
    # dual sign convention: Px + q + z = 0
    np.testing.assert_allclose(sol.z, [2.0, -1.0, 0.0], atol=1e-9)


def test_equality_constrained():
    # min x1^2 + x2^2  s.t. x1 + x2 = 2
    inst = qp.QpInstance(P=2 * np.eye(2), q=np.zeros(2), A=[[1.0, 1.0]], l=[2.0], u=[2.0])
    sol = qp.solve(inst)
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-10)
    np.testing.assert_allclose(sol.y, [-2.0], atol=1e-9)


def test_infeasible_problem_is_not_optimal():
    inst = qp.QpInstance(P=np.eye(1), q=np.zeros(1), A=[[1.0], [1.0]], l=[2.0, -np.inf], u=[np.inf, 1.0])
    sol = qp.solve(inst)
    assert not sol.optimal


def test_warm_start_reproduces_solution(rng):
    inst = random_qp(7, 6, 6, eq=1)
    cold = qp.solve(inst)
    warm = qp.solve(inst, warm_start=cold)
    assert warm.optimal and warm.warm_started
    np.testing.assert_allclose(warm.x, cold.x, atol=1e-7)


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        qp.QpInstance(P=np.eye(2), q=np.zeros(3))
    with pytest.raises(ValueError):
        qp.QpInstance(P=np.eye(1), q=np.zeros(1), lb=[1.0], ub=[0.0])
    with pytest.raises(ValueError):
        qp.solve(qp.QpInstance(P=np.eye(1), q=np.zeros(1)), method="magic")


def test_dump_and_load_round_trip(tmp_path):
    inst = random_qp(3, 4, 3, eq=1)
    path = tmp_path / "inst.txt"
    qp.dump_instance(inst, path)
    back = qp.load_instance(path)
    for name in ("P", "q", "A", "l", "u", "lb", "ub"):
        np.testing.assert_array_equal(getattr(back, name), getattr(inst, name))


def test_kkt_residuals_detect_bad_point():
    inst = qp.QpInstance(P=np.eye(2), q=np.zeros(2), lb=np.ones(2), ub=2 * np.ones(2))
    good = qp.solve(inst)
    assert qp.kkt_residuals(inst, good).within()
    bad = qp.QpSolution(x=np.zeros(2), y=np.zeros(0), z=np.zeros(2), status="optimal", iterations=0)
    res = qp.kkt_residuals(inst, bad)
    assert res.primal > 0.5 and not res.within()
