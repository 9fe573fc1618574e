"""Command-line entry point: load a scenario, run an experiment, write artifacts.

Output layout: ``<out>/<scenario name>/<label>/`` holding ``trajectory.csv``,
``report.txt``, ``report.json``, ``oracle.csv`` and ``scenario.resolved``.
Experiments with several runs put each run in its own subdirectory.

Exit codes: 0 success, 1 parse/validation error, 2 numerical blow-up, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .olfc import centralized_solve, write_solution_csv
from .scenario_io import (
    PRESETS,
    ParseError,
    ValidationError,
    check_feasible,
    dump_preset,
    dump_scenario,
    load_scenario,
    preset_scenario,
)
from .sim import Scenario, Trajectory, constraint_violations, run_and_report, sweep

log = logging.getLogger("iesfc")

EXPERIMENTS = ("coupling-comparison", "damping-sweep", "custom")
DEFAULT_K_GRID = (0.1, 0.3, 1.0, 3.0, 10.0, 100.0)
ROBUST_RANGE = (0.1, 10.0)

EXIT_OK, EXIT_INVALID, EXIT_BLOWUP, EXIT_IO = 0, 1, 2, 3


@dataclass(frozen=True)
class RunConfig:
    scenario_path: Path | None = None
    preset: str | None = None
    experiment: str = "custom"
    out: Path = Path("runs")
    jobs: int = 1
    seed: int | None = None
    decimate: int | None = None
    label: str | None = None
    k_grid: tuple[float, ...] = DEFAULT_K_GRID


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def write_report(report: dict, directory: Path) -> None:
    flat = flatten(report)
    with open(directory / "report.txt", "w") as fh:
        for k, v in flat.items():
            fh.write(f"{k}: {v}\n")
    with open(directory / "report.json", "w") as fh:
        json.dump({k: _jsonable(v) for k, v in flat.items()}, fh, indent=1)
        fh.write("\n")


def write_run(directory: Path, scenario: Scenario, traj: Trajectory | None, report: dict | None, oracle) -> None:
    """All artifacts of one simulation; ``report`` None marks a blow-up."""
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "scenario.resolved").write_text(dump_scenario(scenario))
    write_solution_csv(scenario.controlled_problem(), oracle, directory / "oracle.csv")
    if traj is not None:
        traj.write_csv(directory / "trajectory.csv")
    if report is None:
        report = {"scenario": scenario.name, "blowup_time": traj.blowup_time if traj is not None else None}
    write_report({**report, "oracle_file": "oracle.csv"}, directory)


def _resolve(config: RunConfig) -> tuple[Scenario, str]:
    """Scenario and experiment named by the config (``--preset`` may name either)."""
    experiment = config.experiment
    preset = config.preset
    if preset in EXPERIMENTS:
        experiment, preset = preset, None
    if config.scenario_path is not None:
        scenario = load_scenario(config.scenario_path)
    else:
        scenario = preset_scenario(preset or "paper-bus3")
        errors = check_feasible(scenario)
        if errors:
            raise ValidationError(errors)
    if config.decimate is not None:
        scenario = replace(scenario, integrator=replace(scenario.integrator, decimation=config.decimate))
    if config.seed is not None:
        scenario = replace(scenario, comm=replace(scenario.comm, seed=config.seed))
    errors = scenario.integrator.validate()
    if errors:
        raise ValidationError(errors)
    return scenario, experiment


def _summary(report: dict | None) -> str:
    if report is None:
        return "blow-up"
    return (f"max tail |omega| {report['max_tail_omega']:.3e}, primal distance {report['primal_distance']:.3e}, "
            f"converged {report['converged']}")


def _custom(scenario: Scenario, root: Path) -> int:
    oracle = centralized_solve(scenario.controlled_problem())
    traj, report, _ = run_and_report(scenario, oracle)
    write_run(root, scenario, traj, report, oracle)
    log.info("%s: %s", scenario.name, _summary(report))
    return EXIT_OK if report is not None else EXIT_BLOWUP


def _coupling(scenario: Scenario, root: Path) -> int:
    runs = {}
    for tag, enforced in (("e1", False), ("e2", True)):
        sc = replace(scenario, chp_enforced=enforced, name=f"{scenario.name}/{tag}")
        oracle = centralized_solve(sc.controlled_problem())
        traj, report, _ = run_and_report(sc, oracle)
        write_run(root / tag, sc, traj, report, oracle)
        log.info("%s: %s", sc.name, _summary(report))
        runs[tag] = (traj, report)
    if any(r is None for _, r in runs.values()):
        return EXIT_BLOWUP
    (t1, r1), (t2, r2) = runs["e1"], runs["e2"]
    true_problem = scenario.true_problem()
    chp1 = float(constraint_violations(t1, true_problem)["chp"][-1])
    chp2 = float(constraint_violations(t2, true_problem)["chp"][-1])
    comparison = {
        "chp_violation_e1": f"{chp1:.4f}",
        "chp_violation_e2": f"{chp2:.4f}",
        "d_difference": np.round(t1.d[-1] - t2.d[-1], 6).tolist(),
        "q_difference": np.round(t1.q[-1] - t2.q[-1], 6).tolist(),
        "max_tail_omega_e1": r1["max_tail_omega"],
        "max_tail_omega_e2": r2["max_tail_omega"],
        "oracle_files": "e1/oracle.csv e2/oracle.csv",
    }
    write_report(comparison, root)
    log.info("CHP violation e1 %s, e2 %s", comparison["chp_violation_e1"], comparison["chp_violation_e2"])
    return EXIT_OK


def _damping_sweep(scenario: Scenario, root: Path, grid, jobs: int) -> int:
    oracle = centralized_solve(scenario.controlled_problem())
    results = sweep(scenario, grid, jobs=jobs, keep_trajectories=True)
    rows = []
    failed = False
    for res in results:
        sc = replace(scenario, name=f"{scenario.name}/k={res.value:g}")
        write_run(root / f"k={res.value:g}", sc, res.trajectory, res.report, oracle)
        rep = res.report or {}
        rows.append((res.value, res.verdict, rep.get("settling_time", math.nan), rep.get("max_tail_omega", math.nan),
                     rep.get("primal_distance", math.nan)))
        if res.report is None and ROBUST_RANGE[0] <= res.value <= ROBUST_RANGE[1]:
            failed = True
        log.info("k = %g: %s", res.value, res.verdict)
    with open(root / "verdicts.csv", "w") as fh:
        fh.write("k,verdict,settling_time,max_tail_omega,primal_distance\n")
        for k, verdict, st, om, pd in rows:
            fh.write(f"{k!r},{verdict},{st!r},{om!r},{pd!r}\n")
    write_report({f"k={k:g}": verdict for k, verdict, *_ in rows} | {"oracle_file": "oracle.csv"}, root)
    write_solution_csv(scenario.controlled_problem(), oracle, root / "oracle.csv")
    return EXIT_BLOWUP if failed else EXIT_OK


def run_experiment(config: RunConfig) -> int:
    """Run the configured experiment and write its artifacts; returns the exit code."""
    try:
        scenario, experiment = _resolve(config)
    except (ParseError, ValidationError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("cannot read scenario: %s", exc)
        return EXIT_IO
    if experiment not in EXPERIMENTS:
        log.error("unknown experiment %r", experiment)
        return EXIT_INVALID
    label = config.label or time.strftime("%Y%m%d-%H%M%S")
    root = config.out / scenario.name / label
    try:
        root.mkdir(parents=True, exist_ok=True)
        if experiment == "coupling-comparison":
            return _coupling(scenario, root)
        if experiment == "damping-sweep":
            return _damping_sweep(scenario, root, config.k_grid, config.jobs)
        return _custom(scenario, root)
    except OSError as exc:
        log.error("cannot write outputs: %s", exc)
        return EXIT_IO


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iesfc", description=__doc__.splitlines()[0])
    p.add_argument("--scenario", type=Path, help="YAML scenario file")
    p.add_argument("--preset", help=f"built-in scenario ({', '.join(PRESETS)}) or experiment name")
    p.add_argument("--experiment", choices=EXPERIMENTS, default="custom")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output root (default: runs)")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs in a sweep")
    p.add_argument("--seed", type=int, help="seed for the communication drop model")
    p.add_argument("--decimate", type=int, help="record every n-th integrator step")
    p.add_argument("--label", help="run directory name (default: timestamp)")
    p.add_argument("--k-grid", type=float, nargs="+", default=list(DEFAULT_K_GRID),
                   help="damping multipliers for damping-sweep")
    p.add_argument("--dump-preset", metavar="NAME", help="print a preset as YAML and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.dump_preset:
        try:
            sys.stdout.write(dump_preset(args.dump_preset))
        except KeyError as exc:
            log.error("%s", exc.args[0])
            return EXIT_INVALID
        return EXIT_OK
    if args.scenario is not None and args.preset in PRESETS:
        log.error("give either --scenario or a scenario preset, not both")
        return EXIT_INVALID
    if args.preset is not None and args.preset not in PRESETS and args.preset not in EXPERIMENTS:
        log.error("unknown preset %r", args.preset)
        return EXIT_INVALID
    config = RunConfig(
        scenario_path=args.scenario, preset=args.preset, experiment=args.experiment, out=args.out,
        jobs=max(1, args.jobs), seed=args.seed, decimate=args.decimate, label=args.label,
        k_grid=tuple(args.k_grid),
    )
    return run_experiment(config)


if __name__ == "__main__":
    sys.exit(main())
