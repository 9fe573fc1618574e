import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from iesfc.comm import CommConfig, Exchanger
from iesfc.controller import (
    Controller,
    ControllerGains,
    ControllerState,
    InaccurateDamping,
    Measurements,
    MissingNeighborMessage,
    controller_derivatives,
    positive_projection,
    recover_mu,
    robustness_interval,
)
from iesfc.olfc import centralized_solve
from iesfc.scenario_io import PRESETS, preset_scenario
from iesfc.sim import fixed_point_residual

pos = st.floats(0.01, 100)
val = st.floats(-100, 100)


def test_projection_examples():
    assert positive_projection(-1.0, 0.0) == 0
    assert positive_projection(-1.0, 0.5) == -1
    assert positive_projection(2.0, 0.0) == 2


@given(val, st.floats(0, 100))
def test_projection_never_pushes_zero_negative(w, v):
    out = float(positive_projection(w, v))
    assert out in (w, 0.0)
    if v == 0:
        assert out >= 0


def test_recover_mu_examples():
    assert recover_mu(2.0, 0.5, 1.0, 1.0, 1.0) == pytest.approx(2.5)
    assert recover_mu(0.0, 0.0, 3.0, 0.2, 7.0) == 0
    assert recover_mu(1.0, 5.0, 2.0, 4.0, math.inf) == pytest.approx(2.0)


@given(val, val, pos, pos, pos)
def test_recover_mu_inverts_r(mu, omega, K, eps_mu, eps_lambda):
    r = K / eps_mu * mu - K / eps_lambda * omega
    assert recover_mu(r, omega, K, eps_mu, eps_lambda) == pytest.approx(mu, rel=1e-9, abs=1e-9)


def test_robustness_interval_unit():
    lo, hi = robustness_interval(1.0, 1.0)
    assert lo == pytest.approx(2 * (1 - math.sqrt(2)))
    assert hi == pytest.approx(1 + math.sqrt(2))


@given(pos, pos, pos)
def test_robustness_interval_shape(L, D, extra):
    lo, hi = robustness_interval(L, D)
    assert lo < 0 < hi
    assert robustness_interval(L, D + extra)[1] > hi


def test_robustness_interval_rejects_nonpositive():
    with pytest.raises(ValueError):
        robustness_interval(0.0, 1.0)


def test_inaccurate_damping_modes():
    D = np.array([1.0, 2.0])
    assert InaccurateDamping("multiplier", 3.0).apply(D) == pytest.approx([3.0, 6.0])
    assert InaccurateDamping("additive", 0.5).additive_error(D) == pytest.approx([0.5, 0.5])
    with pytest.raises(ValueError):
        InaccurateDamping("multiplier", 0.0)


def test_gains_must_be_positive(bus3):
    g = replace(bus3.gains, eps_d=np.array([1.0, -1.0, 1.0]))
    assert any("eps_d" in e for e in g.validate(bus3.problem))


def rates_at(ctrl, s, omega, P, q_in, problem):
    ex = Exchanger(problem.topology)
    mu = ctrl.mu(s.r, omega)
    inbox = ex.exchange(0, mu, s.phi, s.sigma_p, s.sigma_m)
    return ctrl.derivatives(s, Measurements(omega, P, q_in), inbox)


def test_zero_state_is_at_rest(bus3):
    prob = bus3.problem
    ctrl = Controller(prob, bus3.gains)
    s = ControllerState.zeros(prob)
    ds = rates_at(ctrl, s, np.zeros(3), np.zeros(3), prob.params.q_in, prob)
    for name in ControllerState.field_names():
        assert np.all(getattr(ds, name) == 0), name


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_oracle_point_is_fixed_point(name):
    sc = preset_scenario(name)
    oracle = centralized_solve(sc.controlled_problem())
    assert fixed_point_residual(sc, oracle) <= 1e-6


def test_bound_multiplier_activates_on_violation(bus3):
    prob = bus3.problem
    ctrl = Controller(prob, bus3.gains)
    s = ControllerState.zeros(prob)
    s.d[0] = prob.d_hi[0] + 0.1
    ds = rates_at(ctrl, s, np.zeros(3), np.zeros(3), prob.params.q_in, prob)
    assert ds.gamma_m[0] == pytest.approx(bus3.gains.eps_gamma[0] * 0.1)
    assert ds.gamma_p[0] == 0


def test_free_function_matches_class(bus3):
    prob = bus3.problem
    s = ControllerState.zeros(prob)
    s.d[:] = [0.1, -0.05, 0.2]
    s.r[:] = [0.3, 0.0, -0.1]
    omega = np.array([0.01, -0.02, 0.0])
    ex = Exchanger(prob.topology)
    ctrl = Controller(prob, bus3.gains)
    inbox = ex.exchange(0, ctrl.mu(s.r, omega), s.phi, s.sigma_p, s.sigma_m)
    meas = Measurements(omega, np.array([0.05, 0.0, -0.02]), prob.params.q_in)
    a = ctrl.derivatives(s, meas, inbox)
    b = controller_derivatives(s, meas, inbox, prob, bus3.gains)
    for name in ControllerState.field_names():
        assert np.array_equal(getattr(a, name), getattr(b, name))


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_rates_ignore_uncontrolled_injection(state, p_in, omega):
    sc = preset_scenario("paper-bus3")
    prob = sc.problem
    other = prob.with_injections(np.array(p_in), prob.params.q_in)
    s = ControllerState.zeros(prob)
    s.d[:] = state
    s.r[:] = omega
    s.phi[:] = state[::-1]
    om = np.array(omega)
    meas = Measurements(om, np.array(state) * 0.3, prob.params.q_in)
    out = []
    for p in (prob, other):
        ctrl = Controller(p, sc.gains)
        inbox = Exchanger(p.topology).exchange(0, ctrl.mu(s.r, om), s.phi, s.sigma_p, s.sigma_m)
        out.append(ctrl.rates(ctrl.pack(s), meas, inbox))
    assert out[0].tobytes() == out[1].tobytes()


def test_missing_message_is_an_error(bus3):
    prob = bus3.problem
    ctrl = Controller(prob, bus3.gains)
    s = ControllerState.zeros(prob)
    ex = Exchanger(prob.topology, CommConfig(drop_probability=0.9, seed=3))
    inbox = ex.exchange(0, np.zeros(3), s.phi, s.sigma_p, s.sigma_m)
    assert len(inbox) < 2 * prob.n_lines
    with pytest.raises(MissingNeighborMessage):
        ctrl.rates(ctrl.pack(s), Measurements(np.zeros(3), np.zeros(3), prob.params.q_in), inbox)


def test_default_gains_tie_eps_lambda_to_inertia(bus3):
    g = ControllerGains.default(bus3.problem)
    assert g.eps_lambda == pytest.approx(1.0 / bus3.problem.params.inertia)
    assert np.all(g.eps_d == 1.0)


def test_stationary_primal_zeroes_gradient(bus3):
    prob = bus3.problem
    gains = replace(bus3.gains, primal_mode="dynamic")
    ctrl = Controller(prob, gains)
    s = ControllerState.zeros(prob)
    s.r[:] = [0.4, -0.2, 0.1]
    omega = np.array([0.01, 0.0, -0.01])
    s.d[:], s.q[:] = ctrl.stationary_primal(s, omega, prob.params.q_in)
    ds = rates_at(ctrl, s, omega, np.zeros(3), prob.params.q_in, prob)
    assert ds.d == pytest.approx(np.zeros(3), abs=1e-12)
