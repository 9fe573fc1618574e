import numpy as np
import pytest
import yaml

from iesfc.olfc import ChpRegion
from iesfc.scenario_io import (
    PRESETS,
    ParseError,
    ValidationError,
    dump_preset,
    dump_scenario,
    load_scenario,
    load_scenario_text,
    preset_document,
    preset_scenario,
)


def text(doc):
    return yaml.safe_dump(doc, sort_keys=False)


def test_bus3_preset_contents(bus3):
    topo = bus3.problem.topology
    i = topo.index(3)
    (dist,) = bus3.disturbances
    assert (dist.bus, dist.delta_p, dist.delta_q) == (3, 0.3, 0.3)
    p = bus3.problem.params
    assert (p.buffer_lo[i], p.buffer_hi[i]) == (-0.1, 0.1)
    assert bus3.problem.chp[i] == ChpRegion(upper=[(0.5, 0.0)])
    assert topo.n_buses == 3 and topo.n_lines == 3
    assert topo.generator_buses == {1, 2, 3}


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_round_trip(name, tmp_path):
    once = dump_preset(name)
    path = tmp_path / "s.yaml"
    path.write_text(once)
    assert dump_scenario(load_scenario(path)) == once


def test_zero_damping_names_bus():
    doc = preset_document("paper-bus3")
    doc["buses"][1]["damping"] = 0.0
    with pytest.raises(ValidationError) as info:
        load_scenario_text(text(doc))
    assert any("bus 2" in e and "dividing by D" in e for e in info.value.errors)


def test_all_errors_are_listed():
    doc = preset_document("paper-bus3")
    doc["buses"][0]["damping"] = -1.0
    doc["buses"][2]["damping"] = 0.0
    with pytest.raises(ValidationError) as info:
        load_scenario_text(text(doc))
    assert sum("damping" in e for e in info.value.errors) == 2


def test_unsorted_disturbances():
    doc = preset_document("paper-bus3")
    doc["disturbances"] = [{"time": 3.0, "bus": 1, "delta_p": 0.1}, {"time": 1.0, "bus": 2, "delta_p": 0.1}]
    with pytest.raises(ValidationError, match="sorted"):
        load_scenario_text(text(doc))


def test_empty_disturbances_are_valid():
    doc = preset_document("paper-bus3")
    doc["disturbances"] = []
    assert load_scenario_text(text(doc)).disturbances == ()


def test_infeasible_scenario_fails_oracle():
    doc = preset_document("single-chp")
    doc["buses"][0]["cost_h"] = {"a": 1.0}
    doc["disturbances"][0]["delta_q"] = 0.3
    with pytest.raises(ValidationError, match="infeasible"):
        load_scenario_text(text(doc))


def test_bad_yaml_reports_line():
    with pytest.raises(ParseError) as info:
        load_scenario_text("name: x\nbuses: [\n  {id: 1\n")
    assert info.value.line is not None


def test_missing_and_mistyped_fields():
    with pytest.raises(ParseError, match="buses"):
        load_scenario_text("name: x\n")
    doc = preset_document("single-bus")
    doc["buses"][0]["damping"] = "heavy"
    with pytest.raises(ParseError, match=r"buses\[0\]\.damping"):
        load_scenario_text(text(doc))
    doc = preset_document("single-bus")
    doc["buses"][0]["colour"] = "red"
    with pytest.raises(ParseError, match="colour"):
        load_scenario_text(text(doc))


def test_per_bus_gain_lists():
    doc = preset_document("paper-bus3")
    doc["gains"]["eps_d"] = [10.0, 20.0, 30.0]
    sc = load_scenario_text(text(doc), check_oracle=False)
    assert sc.gains.eps_d.tolist() == [10.0, 20.0, 30.0]
    doc["gains"]["eps_d"] = [1.0, 2.0]
    with pytest.raises(ValidationError, match="eps_d"):
        load_scenario_text(text(doc), check_oracle=False)


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset_scenario("bus-99")


def test_topology_errors_are_collected():
    doc = preset_document("paper-bus3")
    doc["lines"].append({"from": 1, "to": 7, "susceptance": 1.0})
    doc["lines"].append({"from": 2, "to": 2, "susceptance": 1.0})
    with pytest.raises(ValidationError) as info:
        load_scenario_text(text(doc))
    errs = info.value.errors
    assert any("unknown bus" in e for e in errs) and any("self-loop" in e for e in errs)


def test_dump_is_plain_yaml(bus3):
    doc = yaml.safe_load(dump_scenario(bus3))
    assert doc["gains"]["eps_lambda"] == pytest.approx((1 / np.array([0.5, 0.4, 0.3])).tolist())


def test_load_buses_default_to_uncontrolled():
    doc = preset_document("two-bus-linelimit")
    doc["buses"][1].update(kind="load", inertia=0.0)
    sc = load_scenario_text(text(doc), check_oracle=False)
    assert sc.problem.controllable.tolist() == [True, False]
    doc["buses"][1]["controllable"] = True
    assert load_scenario_text(text(doc), check_oracle=False).problem.controllable.tolist() == [True, True]
