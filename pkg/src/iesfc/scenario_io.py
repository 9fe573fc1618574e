"""YAML scenario files and the built-in presets.

One document describes one experiment::

    name: paper-bus3
    buses:
      - {id: 1, kind: generator, inertia: 0.5, damping: 1.0, cost_e: {a: 1.0}, ...}
    lines:
      - {from: 1, to: 2, susceptance: 8.0, flow_bounds: [-.inf, .inf]}
    gains: {eps_d: 50, eps_phi: 0.2, ...}      # scalars broadcast, lists are per entry
    disturbances:
      - {time: 1.0, bus: 3, delta_p: 0.3, delta_q: 0.3}
    damping_model: {mode: exact, value: 1.0}
    chp_enforced: true
    integrator: {step: 0.001, duration: 60, method: rk4, decimation: 10}
    comm: {delay_rounds: 0, drop_probability: 0.0, seed: 0, replay_on_drop: false}

Unbounded limits are written ``.inf`` / ``-.inf``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .comm import CommConfig
from .controller import ControllerGains, InaccurateDamping
from .network import Line, NetworkTopology, PhysicalParams, TopologyError
from .olfc import ChpRegion, Infeasible, NonConvergence, OlfcProblem, QuadraticCost, centralized_solve
from .sim import Disturbance, IntegratorConfig, Scenario


class ParseError(ValueError):
    """Malformed document: bad YAML, a missing field or a value of the wrong type."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class ValidationError(ValueError):
    """Well-formed document whose contents break one or more invariants."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid scenario:\n  - " + "\n  - ".join(errors))
        self.errors = list(errors)


INF = math.inf

BUS_DEFAULTS = {
    "kind": "generator",
    "inertia": 0.0,
    "cost_e": {"a": 1.0, "b": 0.0},
    "cost_h": {"a": 1.0, "b": 0.0},
    "controllable": True,
    "heat_controllable": False,
    "chp": {"upper": [], "lower": []},
    "d_bounds": [-INF, INF],
    "heat_buffer": [-INF, INF],
    "p_in": 0.0,
    "q_in": 0.0,
}

GAIN_NAMES = ("eps_d", "eps_q", "eps_phi", "eps_lambda", "eps_mu", "K", "eps_zeta_up", "eps_zeta_lo",
              "eps_gamma", "eps_delta", "eps_sigma")


def _num(value, field: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"expected a number, got {value!r}", field=field)
    return float(value)


def _int(value, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"expected an integer, got {value!r}", field=field)
    return value


def _flag(value, field: str) -> bool:
    if not isinstance(value, bool):
        raise ParseError(f"expected true/false, got {value!r}", field=field)
    return value


def _pair(value, field: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ParseError("expected a [low, high] pair", field=field)
    return _num(value[0], field), _num(value[1], field)


def _mapping(value, field: str) -> dict:
    if not isinstance(value, dict):
        raise ParseError("expected a mapping", field=field)
    return value


def _check_keys(doc: dict, allowed, field: str) -> None:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ParseError(f"unknown key(s) {sorted(unknown)}", field=field)


def _cost(doc, field: str) -> tuple[float, float]:
    doc = _mapping(doc, field)
    _check_keys(doc, ("a", "b"), field)
    return _num(doc.get("a", 1.0), f"{field}.a"), _num(doc.get("b", 0.0), f"{field}.b")


def _chp(doc, field: str) -> ChpRegion:
    doc = _mapping(doc, field)
    _check_keys(doc, ("upper", "lower"), field)
    sides = {}
    for side in ("upper", "lower"):
        rows = doc.get(side, []) or []
        if not isinstance(rows, list):
            raise ParseError("expected a list of [k, b] pairs", field=f"{field}.{side}")
        sides[side] = [_pair(r, f"{field}.{side}[{j}]") for j, r in enumerate(rows)]
    return ChpRegion(**sides)


def parse_document(doc) -> tuple[Scenario, list[str]]:
    """Build a Scenario from a parsed YAML mapping.

    Structural problems raise :class:`ParseError`; invariant violations are
    collected and returned (the Scenario is None when they prevent
    construction).
    """
    doc = _mapping(doc, "<root>")
    _check_keys(doc, ("name", "buses", "lines", "gains", "disturbances", "damping_model", "chp_enforced",
                      "integrator", "comm"), "<root>")
    if "buses" not in doc:
        raise ParseError("missing required key", field="buses")
    buses = doc["buses"]
    if not isinstance(buses, list) or not buses:
        raise ParseError("expected a non-empty list of buses", field="buses")
    errors: list[str] = []

    rows = []
    for j, raw in enumerate(buses):
        field = f"buses[{j}]"
        raw = _mapping(raw, field)
        _check_keys(raw, ("id", "damping") + tuple(BUS_DEFAULTS), field)
        for key in ("id", "damping"):
            if key not in raw:
                raise ParseError("missing required key", field=f"{field}.{key}")
        b = {**BUS_DEFAULTS, **raw}
        if b["kind"] == "load" and "controllable" not in raw:
            b["controllable"] = False  # load buses only damp unless asked to
        _int(b["id"], f"{field}.id")
        if b["kind"] not in ("generator", "load"):
            raise ParseError("kind must be 'generator' or 'load'", field=f"{field}.kind")
        rows.append({
            "id": b["id"],
            "gen": b["kind"] == "generator",
            "M": _num(b["inertia"], f"{field}.inertia"),
            "D": _num(b["damping"], f"{field}.damping"),
            "ce": _cost(b["cost_e"], f"{field}.cost_e"),
            "ch": _cost(b["cost_h"], f"{field}.cost_h"),
            "ctrl": _flag(b["controllable"], f"{field}.controllable"),
            "heat": _flag(b["heat_controllable"], f"{field}.heat_controllable"),
            "chp": _chp(b["chp"], f"{field}.chp"),
            "d_bounds": _pair(b["d_bounds"], f"{field}.d_bounds"),
            "buffer": _pair(b["heat_buffer"], f"{field}.heat_buffer"),
            "p_in": _num(b["p_in"], f"{field}.p_in"),
            "q_in": _num(b["q_in"], f"{field}.q_in"),
        })

    lines, flow_bounds = [], []
    raw_lines = doc.get("lines", []) or []
    if not isinstance(raw_lines, list):
        raise ParseError("expected a list of lines", field="lines")
    for j, raw in enumerate(raw_lines):
        field = f"lines[{j}]"
        raw = _mapping(raw, field)
        _check_keys(raw, ("from", "to", "susceptance", "flow_bounds"), field)
        for key in ("from", "to", "susceptance"):
            if key not in raw:
                raise ParseError("missing required key", field=f"{field}.{key}")
        for key in ("from", "to"):
            _int(raw[key], f"{field}.{key}")
        lines.append(Line(raw["from"], raw["to"], _num(raw["susceptance"], f"{field}.susceptance")))
        flow_bounds.append(_pair(raw.get("flow_bounds", [-INF, INF]), f"{field}.flow_bounds"))

    ids = [r["id"] for r in rows]
    gens = frozenset(r["id"] for r in rows if r["gen"])
    try:
        topo = NetworkTopology(tuple(ids), gens, frozenset(ids) - gens, tuple(lines))
    except TopologyError as exc:
        return None, errors + str(exc).split("; ")

    col = lambda key: np.array([r[key] for r in rows], dtype=float)  # noqa: E731
    params = PhysicalParams(
        inertia=col("M"), damping=col("D"), p_in=col("p_in"), q_in=col("q_in"),
        buffer_lo=[r["buffer"][0] for r in rows], buffer_hi=[r["buffer"][1] for r in rows],
    )
    problem = OlfcProblem(
        topology=topo, params=params,
        cost_e=QuadraticCost([r["ce"][0] for r in rows], [r["ce"][1] for r in rows]),
        cost_h=QuadraticCost([r["ch"][0] for r in rows], [r["ch"][1] for r in rows]),
        chp=tuple(r["chp"] for r in rows),
        d_lo=[r["d_bounds"][0] for r in rows], d_hi=[r["d_bounds"][1] for r in rows],
        flow_lo=[f for f, _ in flow_bounds], flow_hi=[h for _, h in flow_bounds],
        controllable=[r["ctrl"] for r in rows], heat_controllable=[r["heat"] for r in rows],
    )
    errors += problem.validate()
    if errors:
        return None, errors

    gains = _gains(doc.get("gains", {}) or {}, problem)
    errors += gains.validate(problem)

    disturbances = []
    raw_dist = doc.get("disturbances", []) or []
    if not isinstance(raw_dist, list):
        raise ParseError("expected a list", field="disturbances")
    for j, raw in enumerate(raw_dist):
        field = f"disturbances[{j}]"
        raw = _mapping(raw, field)
        _check_keys(raw, ("time", "bus", "delta_p", "delta_q"), field)
        for key in ("time", "bus"):
            if key not in raw:
                raise ParseError("missing required key", field=f"{field}.{key}")
        disturbances.append(Disturbance(
            _num(raw["time"], f"{field}.time"), _int(raw["bus"], f"{field}.bus"),
            _num(raw.get("delta_p", 0.0), f"{field}.delta_p"), _num(raw.get("delta_q", 0.0), f"{field}.delta_q"),
        ))

    dm = _mapping(doc.get("damping_model", {"mode": "exact"}), "damping_model")
    _check_keys(dm, ("mode", "value"), "damping_model")
    try:
        damping = InaccurateDamping(dm.get("mode", "exact"), _num(dm.get("value", 1.0), "damping_model.value"))
    except ValueError as exc:
        raise ParseError(str(exc), field="damping_model") from exc

    integ = _mapping(doc.get("integrator", {}), "integrator")
    _check_keys(integ, ("step", "duration", "method", "decimation"), "integrator")
    dec = _int(integ.get("decimation", 1), "integrator.decimation")
    integrator = IntegratorConfig(
        step=_num(integ.get("step", 1e-3), "integrator.step"),
        duration=_num(integ.get("duration", 60.0), "integrator.duration"),
        method=str(integ.get("method", "rk4")),
        decimation=dec,
    )

    cm = _mapping(doc.get("comm", {}), "comm")
    _check_keys(cm, ("delay_rounds", "drop_probability", "seed", "replay_on_drop"), "comm")
    comm_kw = dict(
        delay_rounds=_int(cm.get("delay_rounds", 0), "comm.delay_rounds"),
        drop_probability=_num(cm.get("drop_probability", 0.0), "comm.drop_probability"),
        seed=_int(cm.get("seed", 0), "comm.seed"),
        replay_on_drop=_flag(cm.get("replay_on_drop", False), "comm.replay_on_drop"),
    )
    try:
        comm = CommConfig(**comm_kw)
    except ValueError as exc:
        errors.append(str(exc))
        comm = CommConfig()

    scenario = Scenario(
        problem=problem, gains=gains, disturbances=tuple(disturbances), damping=damping,
        chp_enforced=_flag(doc.get("chp_enforced", True), "chp_enforced"),
        integrator=integrator, comm=comm, name=str(doc.get("name", "custom")),
    )
    errors += [e for e in scenario.validate() if e not in errors]
    return scenario, errors


def _gains(doc: dict, problem: OlfcProblem) -> ControllerGains:
    doc = _mapping(doc, "gains")
    _check_keys(doc, GAIN_NAMES + ("omega_coupling", "primal_mode"), "gains")
    scalars, lists = {}, {}
    for name in GAIN_NAMES:
        if name not in doc:
            continue
        v = doc[name]
        if isinstance(v, list):
            lists[name] = np.array([_num(x, f"gains.{name}") for x in v])
        else:
            scalars[name] = _num(v, f"gains.{name}")
    try:
        g = ControllerGains.default(
            problem, **scalars,
            omega_coupling=doc.get("omega_coupling", "derived"), primal_mode=doc.get("primal_mode", "dynamic"),
        )
    except ValueError as exc:
        raise ParseError(str(exc), field="gains") from exc
    return replace(g, **lists) if lists else g


def check_feasible(scenario: Scenario) -> list[str]:
    """Oracle phase-1 on the pre- and post-disturbance problems."""
    errors = []
    for label, prob in (("initial", scenario.problem), ("post-disturbance", scenario.controlled_problem())):
        try:
            centralized_solve(prob)
        except Infeasible as exc:
            errors.append(f"{label} problem is infeasible: {exc}")
        except NonConvergence as exc:
            errors.append(f"{label} problem could not be solved: {exc}")
    return errors


def load_scenario_text(text: str, check_oracle: bool = True) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"not valid YAML: {getattr(exc, 'problem', exc)}",
                         line=mark.line + 1 if mark is not None else None) from exc
    scenario, errors = parse_document(doc)
    if not errors and check_oracle:
        errors = check_feasible(scenario)
    if errors:
        raise ValidationError(errors)
    return scenario


def load_scenario(path, check_oracle: bool = True) -> Scenario:
    """Read and fully validate a scenario file.

    Raises
    ------
    ParseError
        Invalid YAML (with its line) or a missing/mistyped field.
    ValidationError
        Every violated invariant, including oracle infeasibility.
    OSError
        The file cannot be read.
    """
    return load_scenario_text(Path(path).read_text(), check_oracle=check_oracle)


def _plain(x):
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def scenario_to_dict(scenario: Scenario) -> dict:
    """Fully expanded document (every default written out) that loads back to the same scenario."""
    prob = scenario.problem
    topo = prob.topology
    p = prob.params
    gen = topo.is_generator
    buses = []
    for i, bus in enumerate(topo.buses):
        chp = prob.chp[i]
        buses.append({
            "id": bus,
            "kind": "generator" if gen[i] else "load",
            "inertia": float(p.inertia[i]),
            "damping": float(p.damping[i]),
            "cost_e": {"a": float(prob.cost_e.a[i]), "b": float(prob.cost_e.b[i])},
            "cost_h": {"a": float(prob.cost_h.a[i]), "b": float(prob.cost_h.b[i])},
            "controllable": bool(prob.controllable[i]),
            "heat_controllable": bool(prob.heat_controllable[i]),
            "chp": {"upper": _plain(chp.upper), "lower": _plain(chp.lower)},
            "d_bounds": [float(prob.d_lo[i]), float(prob.d_hi[i])],
            "heat_buffer": [float(p.buffer_lo[i]), float(p.buffer_hi[i])],
            "p_in": float(p.p_in[i]),
            "q_in": float(p.q_in[i]),
        })
    lines = [
        {"from": line.from_bus, "to": line.to_bus, "susceptance": line.susceptance,
         "flow_bounds": [float(prob.flow_lo[l]), float(prob.flow_hi[l])]}
        for l, line in enumerate(topo.lines)
    ]
    g = scenario.gains
    gains = {}
    for name in GAIN_NAMES:
        arr = getattr(g, name)
        gains[name] = _plain(arr)
    gains["omega_coupling"] = g.omega_coupling
    gains["primal_mode"] = g.primal_mode
    integ = scenario.integrator
    comm = scenario.comm
    return {
        "name": scenario.name,
        "buses": buses,
        "lines": lines,
        "gains": gains,
        "disturbances": [
            {"time": d.time, "bus": d.bus, "delta_p": d.delta_p, "delta_q": d.delta_q}
            for d in scenario.disturbances
        ],
        "damping_model": {"mode": scenario.damping.mode, "value": _plain(scenario.damping.value)},
        "chp_enforced": scenario.chp_enforced,
        "integrator": {"step": integ.step, "duration": integ.duration, "method": integ.method,
                       "decimation": integ.decimation},
        "comm": {"delay_rounds": comm.delay_rounds, "drop_probability": comm.drop_probability,
                 "seed": comm.seed, "replay_on_drop": comm.replay_on_drop},
    }


def dump_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(scenario), sort_keys=False, default_flow_style=None)


# ---------------------------------------------------------------------------
# presets

_MESH_GAINS = {
    "eps_d": 50.0, "eps_q": 50.0, "eps_gamma": 50.0, "eps_sigma": 50.0,
    "eps_phi": 0.2, "eps_mu": 20.0, "K": 20.0,
    "eps_zeta_up": 5.0, "eps_zeta_lo": 5.0, "eps_delta": 5.0,
}
_INTEGRATOR = {"step": 1e-3, "duration": 60.0, "method": "rk4", "decimation": 10}


def _bus(id, **kw):
    return {"id": id, **kw}


PRESETS: dict[str, dict] = {
    # Three generator buses on a meshed triangle; bus 3 hosts the CHP unit and the heat load.
    "paper-bus3": {
        "name": "paper-bus3",
        "buses": [
            _bus(1, inertia=0.5, damping=1.0, cost_e={"a": 1.0}, d_bounds=[-0.5, 0.5]),
            _bus(2, inertia=0.4, damping=1.2, cost_e={"a": 1.5}, d_bounds=[-0.5, 0.5]),
            _bus(3, inertia=0.3, damping=0.8, cost_e={"a": 1.0}, cost_h={"a": 1.0}, d_bounds=[-0.5, 0.5],
                 heat_controllable=True, heat_buffer=[-0.1, 0.1], chp={"upper": [[0.5, 0.0]]}),
        ],
        "lines": [
            {"from": 1, "to": 2, "susceptance": 8.0, "flow_bounds": [-0.5, 0.5]},
            {"from": 2, "to": 3, "susceptance": 6.0, "flow_bounds": [-0.5, 0.5]},
            {"from": 1, "to": 3, "susceptance": 5.0, "flow_bounds": [-0.5, 0.5]},
        ],
        "gains": dict(_MESH_GAINS),
        "disturbances": [{"time": 1.0, "bus": 3, "delta_p": 0.3, "delta_q": 0.3}],
        "integrator": dict(_INTEGRATOR),
    },
    "single-bus": {
        "name": "single-bus",
        "buses": [_bus(1, inertia=0.5, damping=1.0, cost_e={"a": 1.0}, d_bounds=[-0.5, 0.5])],
        "gains": {"eps_d": 20.0, "eps_mu": 5.0, "K": 5.0, "eps_gamma": 20.0},
        "disturbances": [{"time": 1.0, "bus": 1, "delta_p": 0.3}],
        "integrator": {**_INTEGRATOR, "duration": 20.0},
    },
    "single-chp": {
        "name": "single-chp",
        "buses": [
            _bus(1, inertia=0.5, damping=1.0, cost_e={"a": 1.0}, cost_h={"a": 1.0, "b": -0.3},
                 d_bounds=[-0.5, 0.5], heat_controllable=True, heat_buffer=[-0.1, 0.1],
                 chp={"upper": [[0.5, 0.0]]}),
        ],
        "gains": {"eps_d": 20.0, "eps_q": 20.0, "eps_mu": 5.0, "K": 5.0, "eps_gamma": 20.0,
                  "eps_zeta_up": 5.0, "eps_delta": 5.0},
        "disturbances": [{"time": 1.0, "bus": 1, "delta_p": 0.3, "delta_q": 0.2}],
        "integrator": {**_INTEGRATOR, "duration": 30.0},
    },
    "two-bus-chp": {
        "name": "two-bus-chp",
        "buses": [
            _bus(1, inertia=0.5, damping=1.0, cost_e={"a": 1.0}, d_bounds=[-0.5, 0.5]),
            _bus(2, inertia=0.4, damping=0.8, cost_e={"a": 2.0}, cost_h={"a": 1.0}, d_bounds=[-0.5, 0.5],
                 heat_controllable=True, heat_buffer=[-0.1, 0.1],
                 chp={"upper": [[0.8, 0.05]], "lower": [[0.2, -0.05]]}),
        ],
        "lines": [{"from": 1, "to": 2, "susceptance": 6.0}],
        "gains": dict(_MESH_GAINS),
        "disturbances": [{"time": 1.0, "bus": 2, "delta_p": 0.2, "delta_q": 0.25}],
        "integrator": {**_INTEGRATOR, "duration": 40.0},
    },
    "two-bus-linelimit": {
        "name": "two-bus-linelimit",
        "buses": [
            _bus(1, inertia=0.5, damping=1.0, cost_e={"a": 1.0}, d_bounds=[-0.5, 0.5]),
            _bus(2, inertia=0.4, damping=1.0, cost_e={"a": 1.0}, d_bounds=[-0.5, 0.5]),
        ],
        "lines": [{"from": 1, "to": 2, "susceptance": 6.0, "flow_bounds": [-0.05, 0.05]}],
        "gains": dict(_MESH_GAINS),
        "disturbances": [{"time": 1.0, "bus": 2, "delta_p": 0.3}],
        "integrator": {**_INTEGRATOR, "duration": 40.0},
    },
}


def preset_document(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def preset_scenario(name: str, check_oracle: bool = False) -> Scenario:
    scenario, errors = parse_document(preset_document(name))
    if not errors and check_oracle:
        errors = check_feasible(scenario)
    if errors:
        raise ValidationError(errors)
    return scenario


def dump_preset(name: str) -> str:
    """Fully expanded YAML text of a preset, ready to edit."""
    return dump_scenario(preset_scenario(name))
