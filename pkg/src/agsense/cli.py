"""Command-line front end.

Every subcommand reads one scenario file, writes its artifacts under
``<out>/<subcommand>/`` and finishes with a ``manifest.json`` listing them.

Exit codes: 0 ok, 2 invalid config, 3 runtime failure, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import aerial_plan as ap
from . import ground_deploy as gd
from .field_model import write_field_csv, write_weather_csv
from .fitting import Dataset
from .netsim import SensorModel, run_simulation
from .pipeline import fit_eval, predict_eval
from .preprocess import calibrate
from .scenario import ConfigError, FittingCfg, PredictionCfg, Scenario, canonical_yaml, load_config
from .sweeps import (
    AERIAL_COLUMNS, HOVER_COLUMNS, INTERVAL_COLUMNS, aerial_interval_sweep, hover_sweep,
    interval_accuracy_sweep, rows_csv,
)

log = logging.getLogger("agsense")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_NONCONVERGED = 4
MANIFEST_FORMAT = "agsense.manifest/1"
SCENARIO_DIR = Path(__file__).parent / "scenarios"


class MissingSection(ConfigError):
    def __init__(self, command: str, section: str):
        super().__init__([f"{section}: section required by '{command}' is missing"])


class NotConverged(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    scenario: str
    config_sha256: str
    seed: int
    seeds: list[int]
    sim_time_s: tuple[float, float]
    params: dict
    artifacts: list[dict] = field(default_factory=list)
    status: str = "ok"
    wall_clock: dict | None = None

    def to_json(self) -> str:
        d = {"format": MANIFEST_FORMAT, "version": __version__, **asdict(self)}
        d["sim_time_s"] = {"start": self.sim_time_s[0], "end": self.sim_time_s[1]}
        if self.wall_clock is None:
            d.pop("wall_clock")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


class Run:
    """Output directory for one subcommand plus the manifest under construction."""

    def __init__(self, scen: Scenario, command: str, out: Path, seeds: list[int], reproducible: bool):
        self.dir = out / command
        self.dir.mkdir(parents=True, exist_ok=True)
        g = scen.grid
        self.manifest = RunManifest(command, scen.name, scen.config_hash, scen.seed, seeds,
                                    (0.0, g.duration), scen.echo())
        self.reproducible = reproducible
        self.started = time.time()

    def write(self, name: str, text: str) -> None:
        data = text.encode()
        (self.dir / name).write_bytes(data)
        self.manifest.artifacts.append({"path": name, "bytes": len(data),
                                        "sha256": hashlib.sha256(data).hexdigest()})

    def close(self, status: str = "ok") -> None:
        self.manifest.status = status
        self.manifest.artifacts.sort(key=lambda a: a["path"])
        if not self.reproducible:
            end = time.time()
            self.manifest.wall_clock = {"started_unix": self.started, "finished_unix": end,
                                        "elapsed_s": end - self.started}
        (self.dir / "manifest.json").write_text(self.manifest.to_json())


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _seeds(scen: Scenario, n: int | None, default: int) -> list[int]:
    return list(range(scen.seed, scen.seed + (n or default)))


def _require(scen: Scenario, command: str, *sections: str) -> None:
    for s in sections:
        value = getattr(scen.cfg, s)
        if value is None or (isinstance(value, list) and not value):
            raise MissingSection(command, s)


# --------------------------------------------------------------- commands
def cmd_simulate(scen: Scenario, run: Run, args) -> int:
    trace = run_simulation(scen.simulation_setup(run.manifest.seed))
    run.manifest.sim_time_s = (0.0, trace.duration_min * 60.0)
    run.write("samples.csv", trace.samples_csv())
    run.write("ledger.json", trace.ledger_json() + "\n")
    run.write("summary.json", trace.summary_json() + "\n")
    return EXIT_OK


def cmd_fit_eval(scen: Scenario, run: Run, args) -> int:
    rows = []
    for seed in run.manifest.seeds:
        for r in fit_eval(scen, seed):
            rows.append((seed, r))
    buf = io.StringIO()
    buf.write("# schema: agsense.fit_eval/1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "method", "rmse", "mrd", "n"])
    for seed, r in rows:
        w.writerow([seed, r.method, repr(r.rmse), repr(r.mrd), r.n])
    run.write("errors.csv", buf.getvalue())
    means = {m: float(np.mean([r.rmse for _, r in rows if r.method == m]))
             for m in sorted({r.method for _, r in rows})}
    summary = {"mean_rmse": means}
    if "screened_mlp" in means:
        summary["margin_vs"] = {m: 1.0 - means["screened_mlp"] / v for m, v in means.items()
                                if m != "screened_mlp" and v > 0}
    run.write("summary.json", _json(summary))
    return EXIT_OK


def cmd_predict_eval(scen: Scenario, run: Run, args) -> int:
    rows = []
    for seed in run.manifest.seeds:
        rows.extend((seed, r) for r in predict_eval(scen, seed))
    buf = io.StringIO()
    buf.write("# schema: agsense.predict_eval/1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "method", "horizon_s", "mrd", "n", "dim_tag"])
    for seed, r in rows:
        w.writerow([seed, r.method, repr(r.horizon_s), repr(r.mrd), r.n, r.dim_tag])
    run.write("deviation.csv", buf.getvalue())
    agg = {}
    for key in sorted({(r.method, r.dim_tag, r.horizon_s) for _, r in rows}):
        vals = [r.mrd for _, r in rows if (r.method, r.dim_tag, r.horizon_s) == key]
        agg.setdefault(key[0], {}).setdefault(key[1], {})[repr(key[2])] = float(np.mean(vals))
    run.write("summary.json", _json({"mean_mrd": agg}))
    return EXIT_OK


def survey_candidates(scen: Scenario, seed: int) -> gd.CandidateSet:
    """Candidate histograms from the survey file or from a simulated ground survey."""
    dep = scen.cfg.deployment
    if dep.survey_file:
        return gd.read_survey_csv((scen.base_dir / dep.survey_file).read_text())
    wanted = set(dep.candidates or scen.ground_ids())
    setup = scen.simulation_setup(seed, kinds=("ground",), with_commands=False)
    setup.devices = [d for d in setup.devices if d.device_id in wanted]
    trace = run_simulation(setup)
    cal = {d.device_id: d.calibration for d in setup.devices}
    samples = [calibrate(r.sample, cal[r.sample.device_id]) for r in trace.received]
    ds = Dataset.from_samples(samples, dep.survey_step_s, t0=dep.survey_step_s)
    keep = ~np.isnan(ds.values).any(axis=0)
    if keep.sum() < 2:
        raise ValueError("survey has fewer than two complete time columns")
    return gd.CandidateSet.from_series(ds.ids, ds.positions, ds.values[:, keep])


def cmd_deploy(scen: Scenario, run: Run, args) -> int:
    dep = scen.cfg.deployment
    cands = survey_candidates(scen, run.manifest.seed)
    initial = [cands.ids.index(i) for i in dep.initial] if dep.initial else None
    plan = gd.greedy_swap(cands, dep.n, initial, dep.sigma_d, dep.sigma_p, seed=run.manifest.seed)
    weights = gd.learn_weights(cands, plan.selected, plan.params["sigma_d"], dep.sigma_p)
    run.write("survey.csv", gd.write_survey_csv(cands.ids, cands.positions, range(cands.series.shape[1]),
                                                cands.series))
    run.write("plan.json", plan.to_json(cands) + "\n")
    run.write("weights.json", _json({"ids": list(cands.ids), "selected": [cands.ids[i] for i in plan.selected],
                                     "W": weights.W.tolist(), "converged": weights.converged,
                                     "iterations": weights.iterations, "residual": weights.residual}))
    if not weights.converged:
        raise NotConverged(f"label propagation stopped after {weights.iterations} iterations")
    return EXIT_OK


def cmd_plan_uav(scen: Scenario, run: Run, args) -> int:
    u = scen.cfg.uav
    seed = run.manifest.seed
    fld = scen.field_for(seed)
    scan = ap.coarse_scan(fld, scen.scan_grid(), u.scan_time_s,
                          SensorModel(sigma_rel=u.sensor.sigma_rel, p_fault=u.sensor.p_fault), seed)
    coarse = ap.fit_coarse(scan, scen.scan_grid())
    points = ap.compute_pdt(coarse, scen.pdt_params())
    plan = ap.plan_route(points, u.start, scen.uav_energy(), u.hover_s)
    flight = ap.simulate_flight(plan, fld, u.tau_s, u.scan_time_s, scen.uav_energy(),
                                SensorModel(sigma_rel=u.sensor.sigma_rel), seed=seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "t", "value"])
    for s in scan:
        w.writerow([*map(repr, s.position), repr(s.time), repr(s.value)])
    run.write("coarse_scan.csv", buf.getvalue())
    run.write("importance.csv", ap.importance_csv(points))
    run.write("flightplan.json", plan.to_json() + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "t", "truth", "mixed", "measured"])
    for s in flight.samples:
        w.writerow([*map(repr, s.position), repr(s.time), repr(s.truth), repr(s.mixed), repr(s.measured)])
    run.write("flight.csv", buf.getvalue())
    run.manifest.sim_time_s = (u.scan_time_s, flight.end_time)
    return EXIT_OK


def cmd_sweep(scen: Scenario, run: Run, args) -> int:
    sw = scen.cfg.sweeps
    seeds = run.manifest.seeds
    if args.kind == "intervals":
        rows = interval_accuracy_sweep(scen, sw.intervals_min, seeds, sw.probe_times_s, sw.probe_stride)
        run.write("sweep.csv", rows_csv(rows, INTERVAL_COLUMNS))
        extra = {}
    elif args.kind == "aerial":
        rows = aerial_interval_sweep(scen, sw.aerial_intervals_h, seeds, sw.probe_times_s, sw.probe_stride)
        run.write("sweep.csv", rows_csv(rows, AERIAL_COLUMNS))
        extra = {}
    else:
        res = hover_sweep(scen, sw.hover_s, seeds)
        rows = res.rows
        run.write("sweep.csv", rows_csv(rows, HOVER_COLUMNS))
        extra = {"argmin_hover_s": res.argmin_hover_s, "per_seed": res.per_seed}
    key = {"intervals": "sense_min", "aerial": "interval_h", "hover": "hover_s"}[args.kind]
    errors = {repr(getattr(r, key)): r.errors for r in rows if r.flagged}
    run.write("summary.json", _json({"kind": args.kind, "flagged": errors, **extra}))
    return EXIT_RUNTIME if errors else EXIT_OK


def cmd_export_field(scen: Scenario, run: Run, args) -> int:
    fld = scen.field_for(run.manifest.seed)
    g = fld.grid
    stride = args.every or max(1, int(round(600.0 / g.t_step)))
    run.write("field.csv", write_field_csv(fld, range(0, g.n_steps + 1, stride)))
    run.write("weather.csv", write_weather_csv(fld.weather))
    return EXIT_OK


@dataclass(frozen=True)
class Command:
    handler: Callable[[Scenario, Run, argparse.Namespace], int]
    sections: tuple[str, ...] = ()
    seeds: Callable[[Scenario], int] | None = None
    help: str = ""


COMMANDS = {
    "simulate": Command(cmd_simulate, ("devices",), help="run the device network, write samples and ledgers"),
    "fit-eval": Command(cmd_fit_eval, ("devices", "fitting"), lambda s: (s.cfg.fitting or FittingCfg()).seeds,
                        "holdout RMSE of screened MLP vs IDW and MLR"),
    "predict-eval": Command(cmd_predict_eval, ("devices", "prediction"),
                            lambda s: (s.cfg.prediction or PredictionCfg()).seeds,
                            "walk-forward deviation per horizon vs persistence"),
    "deploy": Command(cmd_deploy, ("deployment",), help="choose ground sensor locations by entropy swaps"),
    "plan-uav": Command(cmd_plan_uav, ("uav",), help="coarse scan, importance points and a budgeted route"),
    "export-field": Command(cmd_export_field, help="dump the truth field and weather as CSV"),
}
SWEEP_SECTIONS = {"intervals": ("devices", "sweeps"), "aerial": ("uav", "sweeps"), "hover": ("uav", "sweeps")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agsense", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"agsense {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario and print its canonical form")
    v.add_argument("config")

    def common(sp):
        sp.add_argument("config", help="scenario YAML, or the name of a bundled scenario")
        sp.add_argument("--out", type=Path, help="output root (default: the scenario's output_dir)")
        sp.add_argument("--reproducible", action="store_true", help="omit wall-clock fields from the manifest")
        sp.add_argument("--seeds", type=int, help="number of seeds, counting up from the scenario seed")

    for name, cmd in COMMANDS.items():
        sp = sub.add_parser(name, help=cmd.help)
        common(sp)
        if name == "export-field":
            sp.add_argument("--every", type=int, help="write every Nth time step (default: 10 min)")
    sp = sub.add_parser("sweep", help="interval, aerial-interval or hover-time trade-off sweep")
    sp.add_argument("kind", choices=sorted(SWEEP_SECTIONS))
    common(sp)
    sub.add_parser("scenarios", help="list bundled reference scenarios")
    return p


def resolve_config(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = SCENARIO_DIR / f"{name}.yaml"
    if bundled.exists():
        return bundled
    return path


def _report(exc: ConfigError) -> None:
    for line in exc.problems:
        print(f"error: {line}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "scenarios":
        for p in sorted(SCENARIO_DIR.glob("*.yaml")):
            print(p.stem)
        return EXIT_OK
    try:
        scen = load_config(resolve_config(args.config))
    except ConfigError as exc:
        _report(exc)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        sys.stdout.write(canonical_yaml(scen.cfg))
        return EXIT_OK

    if args.command == "sweep":
        spec = Command(cmd_sweep, SWEEP_SECTIONS[args.kind], lambda s: s.cfg.sweeps.seeds)
        folder = f"sweep-{args.kind}"
    else:
        spec = COMMANDS[args.command]
        folder = args.command
    try:
        _require(scen, folder, *spec.sections)
    except ConfigError as exc:
        _report(exc)
        return EXIT_CONFIG
    seeds = _seeds(scen, args.seeds, spec.seeds(scen) if spec.seeds else 1)
    run = Run(scen, folder, args.out or Path(scen.cfg.output_dir), seeds, args.reproducible)
    try:
        code = spec.handler(scen, run, args)
    except NotConverged as exc:
        print(f"warning: {exc}", file=sys.stderr)
        run.close("not_converged")
        return EXIT_NONCONVERGED
    except Exception as exc:  # any module failure is a runtime error, reported with its type
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        run.close("failed")
        return EXIT_RUNTIME
    run.close("ok" if code == EXIT_OK else "flagged")
    return code


if __name__ == "__main__":
    sys.exit(main())
