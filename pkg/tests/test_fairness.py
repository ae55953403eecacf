import numpy as np
import pytest
from hypothesis import given, strategies as st

from predictor.fairness import (
    FairnessProblem,
    bottlenecks,
    min_r_max,
    solve_maxmin_qp,
    verify_maxmin,
    water_filling,
)
from predictor.model import RateVector, is_feasible

from conftest import make_topology


@st.composite
def topologies(draw, max_nodes=6, max_circuits=5, single_hop=False):
    n = draw(st.integers(1, max_nodes))
    caps = draw(st.lists(st.floats(1.0, 100.0), min_size=n, max_size=n))
    p = draw(st.integers(1, max_circuits))
    paths = []
    for _ in range(p):
        if single_hop:
            paths.append([draw(st.integers(0, n - 1))])
        else:
            k = draw(st.integers(1, n))
            paths.append(draw(st.permutations(range(n)))[:k])
    return make_topology(caps, paths)


def test_chain_example():
    t = make_topology([10, 2], [[0], [0, 1]])
    p = FairnessProblem(t)
    np.testing.assert_allclose(solve_maxmin_qp(p).rates.as_list(), [8, 2], atol=1e-8)
    np.testing.assert_allclose(water_filling(p).as_list(), [8, 2], atol=1e-12)
    assert verify_maxmin(water_filling(p), t)


def test_symmetric_single_node():
    t = make_topology([90], [[0], [0], [0]])
    p = FairnessProblem(t)
    np.testing.assert_allclose(solve_maxmin_qp(p).rates.as_list(), [30, 30, 30], atol=1e-8)
    np.testing.assert_allclose(water_filling(p).as_list(), [30, 30, 30], atol=1e-12)


def test_parking_lot_qp_is_not_maxmin():
    # the long circuit shares each node with one short circuit; max-min gives 5/5/5
    t = make_topology([10, 10], [[0, 1], [0], [1]])
    p = FairnessProblem(t)
    wf = water_filling(p)
    np.testing.assert_allclose(wf.as_list(), [5, 5, 5], atol=1e-12)
    assert verify_maxmin(wf, t)
    qp_rates = solve_maxmin_qp(p).rates
    np.testing.assert_allclose(qp_rates.as_list(), [10 / 3, 20 / 3, 20 / 3], atol=1e-7)
    assert is_feasible(qp_rates, t, tol=1e-9)
    assert not verify_maxmin(qp_rates, t)


def test_bottlenecks_named():
    t = make_topology([10, 2], [[0], [0, 1]])
    b = bottlenecks(RateVector.from_list([8, 2]), t)
    assert b == {0: ["n0"], 1: ["n1"]}
    assert not all(bottlenecks(RateVector.from_list([7, 2]), t).values())


def test_tight_r_max_warns(caplog):
    t = make_topology([10, 2], [[0], [0, 1]])
    p = FairnessProblem(t, r_max=5.0)
    assert not p.bound_ok()
    with caplog.at_level("WARNING"):
        sol = solve_maxmin_qp(p)
    assert "below" in caplog.text
    assert max(sol.rates.as_list()) <= 5.0 + 1e-9
    assert min_r_max(t) == 10.0


@pytest.mark.property
@given(topologies())
def test_water_filling_is_maxmin(t):
    r = water_filling(FairnessProblem(t))
    assert is_feasible(r, t, tol=1e-9)
    assert verify_maxmin(r, t)


@pytest.mark.property
@given(topologies())
def test_qp_is_feasible_and_certified(t):
    sol = solve_maxmin_qp(FairnessProblem(t))
    assert sol.residuals.within()
    assert is_feasible(sol.rates, t, tol=1e-7)


@pytest.mark.property
@given(topologies(single_hop=True))
def test_qp_matches_water_filling_on_single_hop_circuits(t):
    p = FairnessProblem(t)
    a = np.array(solve_maxmin_qp(p).rates.as_list())
    b = np.array(water_filling(p).as_list())
    assert np.max(np.abs(a - b)) <= 1e-4 * p.rate_cap
