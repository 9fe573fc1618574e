import json

import numpy as np
import yaml

from iesfc.cli import EXIT_BLOWUP, EXIT_INVALID, EXIT_IO, EXIT_OK, flatten, main
from iesfc.scenario_io import preset_document


def write(tmp_path, doc, name="s.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


def quick(name="single-bus", duration=3.0, **integ):
    doc = preset_document(name)
    doc["integrator"] = {**doc["integrator"], "duration": duration, **integ}
    return doc


def run_dir(out, name, label):
    return out / name / label


def test_custom_run_writes_artifacts(tmp_path):
    path = write(tmp_path, quick())
    assert main(["--scenario", str(path), "--out", str(tmp_path / "o"), "--label", "a"]) == EXIT_OK
    d = run_dir(tmp_path / "o", "single-bus", "a")
    for f in ("trajectory.csv", "report.txt", "report.json", "oracle.csv", "scenario.resolved"):
        assert (d / f).is_file(), f
    header = (d / "trajectory.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["time", "omega.1"] and "d.1" in header and header[-1] == "U"
    report = json.loads((d / "report.json").read_text())
    assert report["oracle_file"] == "oracle.csv"
    assert "oracle_file: oracle.csv" in (d / "report.txt").read_text()


def test_same_config_same_bytes(tmp_path):
    path = write(tmp_path, quick("two-bus-chp", 4.0))
    for out in ("a", "b"):
        assert main(["--scenario", str(path), "--out", str(tmp_path / out), "--label", "x", "--seed", "7"]) == 0
    a = (tmp_path / "a/two-bus-chp/x/trajectory.csv").read_bytes()
    b = (tmp_path / "b/two-bus-chp/x/trajectory.csv").read_bytes()
    assert a == b


def test_empty_disturbances_give_flat_trajectory(tmp_path):
    doc = quick("paper-bus3", 2.0)
    doc["disturbances"] = []
    path = write(tmp_path, doc)
    assert main(["--scenario", str(path), "--out", str(tmp_path), "--label", "flat"]) == EXIT_OK
    data = np.loadtxt(tmp_path / "paper-bus3/flat/trajectory.csv", delimiter=",", skiprows=1)
    assert np.max(np.abs(data[:, 1:])) == 0


def test_decimate_flag(tmp_path):
    path = write(tmp_path, quick(duration=1.0))
    assert main(["--scenario", str(path), "--out", str(tmp_path), "--label", "d", "--decimate", "100"]) == 0
    rows = (tmp_path / "single-bus/d/trajectory.csv").read_text().splitlines()
    assert len(rows) == 1 + 11


def test_validation_error_exit(tmp_path):
    doc = quick()
    doc["buses"][0]["damping"] = 0.0
    assert main(["--scenario", str(write(tmp_path, doc)), "--out", str(tmp_path)]) == EXIT_INVALID


def test_parse_error_exit(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("buses: [ {id: 1\n")
    assert main(["--scenario", str(path), "--out", str(tmp_path)]) == EXIT_INVALID


def test_missing_file_exit(tmp_path):
    assert main(["--scenario", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == EXIT_IO


def test_unwritable_output_exit(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = write(tmp_path, quick(duration=1.0))
    assert main(["--scenario", str(path), "--out", str(blocker)]) == EXIT_IO


def test_blowup_exit(tmp_path):
    path = write(tmp_path, quick("paper-bus3", 5.0, step=0.2, method="euler", decimation=1))
    out = tmp_path / "o"
    assert main(["--scenario", str(path), "--out", str(out), "--label", "b"]) == EXIT_BLOWUP
    assert "blowup_time" in (out / "paper-bus3/b/report.txt").read_text()


def test_unknown_preset_exit(tmp_path):
    assert main(["--preset", "nope", "--out", str(tmp_path)]) == EXIT_INVALID


def test_dump_preset(capsys):
    assert main(["--dump-preset", "paper-bus3"]) == EXIT_OK
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc["name"] == "paper-bus3" and len(doc["buses"]) == 3
    assert main(["--dump-preset", "nope"]) == EXIT_INVALID


def test_flatten():
    assert flatten({"a": {"b": 1, "c": {"d": 2}}, "e": 3}) == {"a.b": 1, "a.c.d": 2, "e": 3}
