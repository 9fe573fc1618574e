import numpy as np
import pytest

from iesfc.scenario_io import parse_document, preset_scenario


def bus(id, **kw):
    out = {"id": id, "inertia": 0.5, "damping": 1.0}
    out.update(kw)
    return out


def scenario_from(buses, lines=(), **doc):
    """Scenario from a compact document; fails the test on validation errors."""
    full = {"buses": list(buses), "lines": list(lines), **doc}
    sc, errors = parse_document(full)
    assert not errors, errors
    return sc


def random_scenario(rng, n_max=6, step_max=0.5, duration=4.0):
    """Random connected network (a spanning tree plus a chord) with tight bounds and a few random steps."""
    n = int(rng.integers(1, n_max + 1))
    u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    buses = []
    for i in range(1, n + 1):
        b = bus(i, inertia=u(0.2, 1.0), damping=u(0.5, 1.5), cost_e={"a": u(0.5, 2.0)},
                d_bounds=[-u(0.05, 0.4), u(0.05, 0.4)])
        if rng.random() < 0.5:
            b.update(heat_controllable=True, cost_h={"a": u(0.5, 2.0)}, heat_buffer=[-u(0.02, 0.2), u(0.02, 0.2)])
            if rng.random() < 0.6:
                b["chp"] = {"upper": [[u(0.3, 1.0), u(0.0, 0.2)]]}
        buses.append(b)
    lines = []
    for i in range(2, n + 1):
        j = int(rng.integers(1, i))
        lim = u(0.05, 0.4)
        lines.append({"from": j, "to": i, "susceptance": u(2, 8), "flow_bounds": [-lim, lim]})
    if n >= 3 and rng.random() < 0.5:
        lines.append({"from": 1, "to": n, "susceptance": u(2, 8), "flow_bounds": [-0.4, 0.4]})
    steps = []
    for _ in range(int(rng.integers(1, 3))):
        steps.append({"time": u(0.1, 1.0), "bus": int(rng.integers(1, n + 1)),
                      "delta_p": u(-step_max, step_max), "delta_q": u(-step_max, step_max) / 2})
    steps.sort(key=lambda s: s["time"])
    gains = {"eps_d": 20.0, "eps_q": 20.0, "eps_mu": 5.0, "K": 5.0, "eps_phi": 0.5}
    return scenario_from(buses, lines, gains=gains, disturbances=steps,
                         integrator={"step": 1e-3, "duration": duration, "method": "rk4", "decimation": 5})


@pytest.fixture(scope="session")
def bus3():
    return preset_scenario("paper-bus3")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def bus3_run(bus3):
    from iesfc.sim import run_and_report

    traj, report, oracle = run_and_report(bus3)
    assert report is not None, "paper-bus3 blew up"
    return traj, report, oracle


# One line per acceptance criterion, echoed at the end of the session.
CRITERIA: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
