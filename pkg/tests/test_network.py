import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iesfc.network import (
    Line,
    NetworkTopology,
    PhysicalParams,
    PhysicalState,
    TopologyError,
    build_incidence,
    dc_flow,
    heat_buffer,
    net_line_injection,
    physical_derivatives,
)


def triangle():
    return NetworkTopology.from_edges([1, 2, 3], [(1, 2, 8.0), (2, 3, 6.0), (1, 3, 5.0)])


def params(n, **kw):
    base = dict(inertia=np.ones(n), damping=np.ones(n), p_in=np.zeros(n), q_in=np.zeros(n),
                buffer_lo=-np.ones(n), buffer_hi=np.ones(n))
    base.update({k: np.asarray(v, float) for k, v in kw.items()})
    return PhysicalParams(**base)


def test_incidence_two_bus():
    topo = NetworkTopology.from_edges([1, 2], [(1, 2, 1.0)])
    assert build_incidence(topo).tolist() == [[1.0], [-1.0]]


def test_incidence_triangle_columns():
    C = build_incidence(triangle())
    assert C.T.tolist() == [[1, -1, 0], [0, 1, -1], [1, 0, -1]]


@st.composite
def topologies(draw):
    n = draw(st.integers(2, 7))
    pairs = [(i, j) for i in range(1, n + 1) for j in range(1, n + 1) if i != j]
    chosen = draw(st.lists(st.sampled_from(pairs), max_size=12))
    edges = [(i, j, draw(st.floats(0.1, 20))) for i, j in chosen]
    return NetworkTopology.from_edges(range(1, n + 1), edges)


@given(topologies())
def test_incidence_columns_sum_to_zero(topo):
    C = build_incidence(topo)
    assert np.all(C.sum(axis=0) == 0)
    assert np.all(np.abs(C).sum(axis=0) == 2)


@given(topologies(), st.data())
def test_line_injections_sum_to_zero(topo, data):
    flows = data.draw(st.lists(st.floats(-5, 5), min_size=topo.n_lines, max_size=topo.n_lines))
    total = sum(net_line_injection(b, flows, topo) for b in topo.buses)
    assert total == pytest.approx(0.0, abs=1e-9)


def test_dc_flow():
    assert dc_flow(10, 0.1, 0.05) == pytest.approx(0.5)
    assert dc_flow(5, 0.3, 0.3) == 0


def test_net_line_injection_cases():
    iso = NetworkTopology.from_edges([1, 2, 3], [(1, 2, 1.0)])
    assert net_line_injection(3, [0.4], iso) == 0
    assert net_line_injection(1, [0.2], iso) == pytest.approx(0.2)
    path = NetworkTopology.from_edges([1, 2, 3], [(1, 2, 1.0), (2, 3, 1.0)])
    assert net_line_injection(2, [0.2, 0.05], path) == pytest.approx(-0.15)


def test_swing_single_generator():
    topo = NetworkTopology.from_edges([1], [])
    p = params(1, inertia=[2.0], p_in=[0.3])
    omega_dot, flow_dot, omega_load = physical_derivatives(PhysicalState.zeros(topo), [0.0], p, topo)
    assert omega_dot == pytest.approx([0.15])
    assert flow_dot.size == 0 and omega_load.size == 0


def test_load_bus_balance():
    topo = NetworkTopology([1], frozenset(), frozenset([1]))
    p = params(1, inertia=[0.0], damping=[2.0], p_in=[0.3])
    _, _, omega_load = physical_derivatives(PhysicalState.zeros(topo), [0.1], p, topo)
    assert omega_load == pytest.approx([0.1])


def test_equilibrium_is_fixed_point():
    topo = triangle()
    p_in = [0.1, -0.2, 0.3]
    p = params(3, p_in=p_in)
    omega_dot, flow_dot, _ = physical_derivatives(PhysicalState.zeros(topo), p_in, p, topo)
    assert np.all(omega_dot == 0) and np.all(flow_dot == 0)


def test_line_dynamics_follow_frequency_difference():
    topo = NetworkTopology.from_edges([1, 2], [(1, 2, 4.0)])
    state = PhysicalState(np.array([0.2, 0.05]), np.zeros(1), np.zeros(2))
    _, flow_dot, _ = physical_derivatives(state, [0, 0], params(2), topo)
    assert flow_dot == pytest.approx([0.6])


def test_heat_buffer():
    assert heat_buffer(0.3, 0.3) == 0
    assert heat_buffer(0.3, 0.2) == pytest.approx(0.1)
    assert heat_buffer(0.0, 0.05) == pytest.approx(-0.05)


def test_topology_rejects_bad_graphs():
    with pytest.raises(TopologyError, match="self-loop"):
        NetworkTopology.from_edges([1, 2], [(1, 1, 1.0)])
    with pytest.raises(TopologyError, match="unknown bus"):
        NetworkTopology.from_edges([1, 2], [(1, 3, 1.0)])
    with pytest.raises(TopologyError, match="susceptance"):
        NetworkTopology([1, 2], frozenset([1, 2]), frozenset(), (Line(1, 2, 0.0),))


def test_zero_damping_is_reported_per_bus():
    topo = triangle()
    errors = params(3, damping=[1.0, 0.0, 1.0]).validate(topo)
    assert any("bus 2" in e and "damping" in e for e in errors)


@settings(max_examples=30)
@given(topologies())
def test_hop_distance_is_symmetric(topo):
    H = topo.hop_distance()
    assert np.array_equal(H, H.T)
    assert np.all(np.diag(H) == 0)
