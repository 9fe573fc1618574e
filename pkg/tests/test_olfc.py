import numpy as np
import pytest

from iesfc.olfc import (
    ChpRegion,
    Infeasible,
    centralized_solve,
    chp_feasible,
    inequality_slacks,
    kkt_residual,
    objective,
    virtual_flows,
    write_solution_csv,
)
from iesfc.scenario_io import PRESETS, preset_scenario

from conftest import bus, scenario_from
from oracles import grid_search


def one_bus(p=0.3, q=0.0, chp=None, **kw):
    b = bus(1, cost_e={"a": 1.0}, cost_h={"a": 1.0}, d_bounds=[-1, 1], heat_buffer=[-0.1, 0.1],
            heat_controllable=True, p_in=p, q_in=q, **kw)
    if chp:
        b["chp"] = chp
    return scenario_from([b]).problem


def test_chp_region_examples():
    region = ChpRegion(upper=[(0.5, 0.0)])
    assert chp_feasible(region, 0.3, 0.15) == (True, 0.0)
    ok, v = chp_feasible(region, 0.3, 0.2)
    assert not ok and v == pytest.approx(0.05)
    assert chp_feasible(ChpRegion(), 5.0, -3.0) == (True, 0.0)


def test_objective_examples():
    prob = one_bus()
    assert objective(prob, [0.0], [0.0], [0.0]) == 0
    assert objective(prob, [0.0], [0.3], [0.3]) == pytest.approx(0.09)
    two = scenario_from([bus(1, damping=2.0), bus(2)], [{"from": 1, "to": 2, "susceptance": 1.0}]).problem
    base = objective(two, [0, 0], [0, 0], [0, 0])
    assert objective(two, [0.1, 0], [0, 0], [0, 0]) - base == pytest.approx(0.01)


def test_single_bus_closed_form():
    sol = centralized_solve(one_bus())
    assert sol.d == pytest.approx([0.3], abs=1e-6)
    assert sol.q == pytest.approx([0.0], abs=1e-6)
    assert sol.omega == pytest.approx([0.0], abs=1e-9)


def test_chp_and_buffer_can_conflict():
    # q <= 0.5 d forces q <= 0.15 while the buffer needs q >= 0.2
    with pytest.raises(Infeasible):
        centralized_solve(one_bus(q=0.3, chp={"upper": [[0.5, 0.0]]}))


@pytest.mark.parametrize("name", [n for n in PRESETS if n != "paper-bus3"])
def test_oracle_matches_grid(name):
    prob = preset_scenario(name).controlled_problem()
    sol = centralized_solve(prob)
    d, q = grid_search(prob)
    assert np.max(np.abs(sol.d - d)) <= 2e-3
    assert np.max(np.abs(sol.q - q)) <= 2e-3


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_solution_certifies_itself(name):
    prob = preset_scenario(name).controlled_problem()
    sol = centralized_solve(prob)
    assert max(kkt_residual(prob, sol)) <= 1e-6
    assert np.all(np.abs(sol.omega) <= 1e-6)
    for v in sol.multipliers().values():
        assert np.all(v >= -1e-9)


def test_optimal_against_random_feasible_points(rng):
    prob = preset_scenario("paper-bus3").controlled_problem()
    sol = centralized_solve(prob)
    L = prob.topology.laplacian()
    p_in = prob.params.p_in
    checked = 0
    for _ in range(400):
        # the CHP bus must run near its upper range for the heat side to fit
        d = np.array([rng.uniform(-0.5, 0.5), 0.0, rng.uniform(0.4, 0.5)])
        d[1] = p_in.sum() - d[0] - d[2]
        q = prob.params.q_in.copy()
        q[2] = rng.uniform(0.2, 0.5 * d[2])
        phi = np.zeros(3)
        phi[1:] = np.linalg.solve(L[1:, 1:], (p_in - d)[1:])
        sl = inequality_slacks(prob, d, q, phi)
        if all(np.all(v <= 1e-12) for v in sl.values()):
            checked += 1
            assert objective(prob, np.zeros(3), d, q) >= sol.objective - 1e-7
    assert checked > 10


def test_kkt_detects_perturbation():
    prob = preset_scenario("paper-bus3").controlled_problem()
    sol = centralized_solve(prob)
    alpha = prob.strong_convexity()
    moved = sol.copy()
    moved.d[0] += 0.1
    assert kkt_residual(prob, moved).stationarity >= alpha * 0.1 - 1e-6
    neg = sol.copy()
    neg.gamma_p[0] = -0.01
    assert kkt_residual(prob, neg).dual_infeas > 0


def test_virtual_flows_balance_injections():
    prob = preset_scenario("paper-bus3").controlled_problem()
    sol = centralized_solve(prob)
    C = np.array([[1, 0, 1], [-1, 1, 0], [0, -1, -1]], float)
    assert C @ virtual_flows(prob, sol.phi) == pytest.approx(prob.params.p_in - sol.d, abs=1e-7)


def test_solution_csv(tmp_path):
    prob = preset_scenario("two-bus-linelimit").controlled_problem()
    sol = centralized_solve(prob)
    write_solution_csv(prob, sol, tmp_path / "o.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "kind,id,variable,value"
    assert any(row.startswith("line,1-2,sigma_m") or row.startswith("line,1-2,sigma_p") for row in lines)
