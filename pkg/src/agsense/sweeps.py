"""Energy/accuracy trade-off sweeps over ground intervals, UAV sortie intervals and hover time.

Every sweep scores a setting by mean relative deviation between a field
estimate and the truth at fixed probe points and times.  Estimates are
inverse-distance (k=6, p=2) over the most recent readings the server or
UAV holds at each probe time.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import aerial_plan as ap
from .field_model import Field, sample_truth
from .fitting import EPSILON, baseline_idw
from .netsim import run_simulation
from .power import battery_duration, to_mah
from .preprocess import calibrate
from .scenario import Scenario

log = logging.getLogger(__name__)

IDW_K = 6
IDW_P = 2.0
UPLOAD_RATIO = 2  # upload interval = UPLOAD_RATIO x sensing interval, as in the 30/60 default
DEFAULT_BAND_H = (6.0, 12.0)
SWEEP_CSV_SCHEMA = "# schema: agsense.sweep/1"


def relative_deviation(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(est) - np.asarray(truth)) / np.maximum(np.asarray(truth), EPSILON)


def idw_estimate(points: np.ndarray, known_pos: np.ndarray, known_val: np.ndarray) -> np.ndarray:
    ids = list(range(len(known_val)))
    k = min(IDW_K, len(known_val))
    return np.array([baseline_idw(p, known_pos, known_val, k, IDW_P, ids) for p in points])


def default_probe_times(fld: Field, first: float = 7200.0, every: float = 1800.0) -> list[float]:
    end = fld.grid.duration
    return [float(t) for t in np.arange(first, end + 1e-9, every)]


def _truth(fld: Field, points: np.ndarray, t: float) -> np.ndarray:
    return np.array([sample_truth(fld, p, t) for p in points])


@dataclass
class IntervalRow:
    sense_min: int
    upload_min: int
    battery_hours: float
    mrd: float
    energy_units: int  # summed device ledgers over all seeds, 1e-9 mAh
    energy_mAh_per_device_day: float
    seeds: int
    flagged: bool = False
    errors: list[str] = field(default_factory=list)


def _ground_deviation(scen: Scenario, seed: int, intervals: tuple[int, int], probes: np.ndarray,
                      probe_times: Sequence[float]) -> tuple[float, int, int, float]:
    setup = scen.simulation_setup(seed, intervals=intervals, kinds=("ground",), with_commands=False)
    trace = run_simulation(setup)
    cal = {d.device_id: d.calibration for d in setup.devices}
    pos = {d.device_id: d.position for d in setup.devices}
    recs = sorted(trace.received, key=lambda r: (r.arrival_time, r.sample.time, r.sample.device_id))
    devs = []
    i = 0
    latest: dict[str, tuple[float, float]] = {}
    for t in probe_times:
        while i < len(recs) and recs[i].arrival_time <= t:
            s = calibrate(recs[i].sample, cal[recs[i].sample.device_id])
            prev = latest.get(s.device_id)
            if prev is None or s.time >= prev[0]:
                latest[s.device_id] = (s.time, s.pm25)
            i += 1
        if not latest:
            continue
        ids = sorted(latest)
        est = idw_estimate(probes, np.array([pos[d] for d in ids]), np.array([latest[d][1] for d in ids]))
        devs.extend(relative_deviation(est, _truth(setup.field, probes, t)))
    units = sum(sum(led["entries_units"].values()) for led in trace.ledgers.values())
    days = setup.duration_min / 1440.0
    per_dev_day = to_mah(units) / max(len(setup.devices), 1) / days if days > 0 else 0.0
    return float(np.mean(devs)) if devs else math.nan, len(devs), units, per_dev_day


def interval_accuracy_sweep(scen: Scenario, intervals_min: Sequence[int], seeds: Sequence[int],
                            probe_times: Sequence[float] | None = None,
                            probe_stride: int | None = None) -> list[IntervalRow]:
    """Battery life and field-estimate deviation per ground sensing interval."""
    if not intervals_min:
        raise ValueError("interval grid is empty")
    probes = scen.probe_points(probe_stride)
    rows = []
    for sense in sorted(intervals_min):
        iv = (int(sense), int(sense) * UPLOAD_RATIO)
        devs, units, per_day, errors = [], 0, [], []
        for seed in seeds:
            try:
                pt = probe_times or default_probe_times(scen.field_for(seed))
                d, _, u, e = _ground_deviation(scen, seed, iv, probes, pt)
                devs.append(d)
                units += u
                per_day.append(e)
            except Exception as exc:  # a failed cell is reported, not fatal
                log.warning("interval %s seed %s failed: %s", sense, seed, exc)
                errors.append(f"seed {seed}: {exc}")
        rows.append(IntervalRow(iv[0], iv[1], battery_duration(scen.profile, iv),
                                float(np.mean(devs)) if devs else math.nan, units,
                                float(np.mean(per_day)) if per_day else math.nan, len(devs),
                                bool(errors), errors))
    return rows


@dataclass
class AerialRow:
    interval_h: float
    flights_per_day: float
    energy_per_flight_J: float
    uav_energy_per_day_J: float
    mrd: float
    seeds: int
    default_band: bool
    flagged: bool = False
    errors: list[str] = field(default_factory=list)


def survey_plan(scen: Scenario, fld: Field, seed: int, hover_s: float | None = None
                ) -> tuple[ap.FlightPlan, list[ap.ImportancePoint]]:
    """Coarse scan, gap fill, importance points and a budgeted route."""
    u = scen.cfg.uav
    if u is None:
        raise ValueError("scenario has no uav section")
    sensor = ap.SensorModel(sigma_rel=u.sensor.sigma_rel, p_fault=u.sensor.p_fault)
    scan = ap.coarse_scan(fld, scen.scan_grid(), u.scan_time_s, sensor, seed)
    coarse = ap.fit_coarse(scan, scen.scan_grid())
    points = ap.compute_pdt(coarse, scen.pdt_params())
    plan = ap.plan_route(points, u.start, scen.uav_energy(), u.hover_s if hover_s is None else hover_s)
    return plan, points


def _flight_deviation(scen: Scenario, fld: Field, plan: ap.FlightPlan, starts: Sequence[float],
                      probes: np.ndarray, probe_times: Sequence[float], seed: int) -> float:
    u = scen.cfg.uav
    sensor = ap.SensorModel(sigma_rel=u.sensor.sigma_rel)
    flights = []
    for k, t0 in enumerate(starts):
        res = ap.simulate_flight(plan, fld, u.tau_s, t0, scen.uav_energy(), sensor, seed=seed * 1000 + k)
        if res.samples:
            flights.append(res)
    devs = []
    for t in probe_times:
        done = [f for f in flights if f.end_time <= t]
        if not done:
            continue
        last = done[-1]
        pos = np.array([s.position for s in last.samples])
        val = np.array([s.measured for s in last.samples])
        devs.extend(relative_deviation(idw_estimate(probes, pos, val), _truth(fld, probes, t)))
    return float(np.mean(devs)) if devs else math.nan


def aerial_interval_sweep(scen: Scenario, intervals_h: Sequence[float], seeds: Sequence[int],
                          probe_times: Sequence[float] | None = None,
                          probe_stride: int | None = None) -> list[AerialRow]:
    """Daily UAV energy and deviation when one planned route is re-flown every ``interval`` hours.

    The route is planned once per seed from the initial coarse scan, so every
    sortie costs the same energy.
    """
    if not intervals_h:
        raise ValueError("interval grid is empty")
    probes = scen.probe_points(probe_stride)
    rows = []
    plans = {}
    for h in sorted(intervals_h):
        if h <= 0:
            raise ValueError("flight interval must be > 0")
        devs, energies, errors = [], [], []
        for seed in seeds:
            try:
                fld = scen.field_for(seed)
                if seed not in plans:
                    plans[seed] = survey_plan(scen, fld, seed)[0]
                plan = plans[seed]
                horizon = fld.grid.duration
                start0 = scen.cfg.uav.scan_time_s
                starts = [float(t) for t in np.arange(start0, horizon, h * 3600.0)]
                # drop sorties that would run past the simulated day
                flight_s = sum(leg["distance_m"] for leg in plan.legs) / scen.uav_energy().speed \
                    + plan.hover_time_s * len(plan.legs)
                starts = [t for t in starts if t + flight_s <= horizon]
                pt = probe_times or default_probe_times(fld)
                devs.append(_flight_deviation(scen, fld, plan, starts, probes, pt, seed))
                energies.append(plan.exact_total())
            except Exception as exc:
                log.warning("aerial interval %s seed %s failed: %s", h, seed, exc)
                errors.append(f"seed {seed}: {exc}")
        per_flight = sum(energies, Fraction(0)) / len(energies) if energies else Fraction(0)
        per_day = Fraction(24) / Fraction(h) * per_flight
        lo, hi = DEFAULT_BAND_H
        rows.append(AerialRow(float(h), 24.0 / h, float(per_flight), float(per_day),
                              float(np.nanmean(devs)) if devs else math.nan, len(devs),
                              lo <= h <= hi, bool(errors), errors))
    return rows


@dataclass
class HoverRow:
    hover_s: float
    n_positions_visited: float
    mrd: float
    seeds: int
    flagged: bool = False
    errors: list[str] = field(default_factory=list)


@dataclass
class HoverSweep:
    rows: list[HoverRow]
    argmin_hover_s: float
    per_seed: dict = field(default_factory=dict)


def hover_deviation(scen: Scenario, fld: Field, points: list[ap.ImportancePoint], hover_s: float,
                    seed: int) -> tuple[int, float]:
    """Visited count and deviation at every importance point after one sortie.

    Values at unvisited points come from IDW over the sortie's readings; the
    truth reference is the field when the sortie ends.
    """
    u = scen.cfg.uav
    plan = ap.plan_route(points, u.start, scen.uav_energy(), hover_s)
    if not plan.waypoints:
        return 0, math.nan
    res = ap.simulate_flight(plan, fld, u.tau_s, u.scan_time_s, scen.uav_energy(),
                             ap.SensorModel(sigma_rel=u.sensor.sigma_rel), seed=seed)
    targets = np.array([p.position for p in points])
    pos = np.array([s.position for s in res.samples])
    val = np.array([s.measured for s in res.samples])
    est = idw_estimate(targets, pos, val)
    truth = _truth(fld, targets, min(res.end_time, fld.grid.duration))
    return len(plan.waypoints), float(np.mean(relative_deviation(est, truth)))


def hover_sweep(scen: Scenario, hovers_s: Sequence[float], seeds: Sequence[int]) -> HoverSweep:
    if not hovers_s:
        raise ValueError("hover list is empty")
    per_seed: dict[int, list[tuple[int, float]]] = {}
    for seed in seeds:
        fld = scen.field_for(seed)
        _, points = survey_plan(scen, fld, seed)
        per_seed[seed] = [hover_deviation(scen, fld, points, h, seed) for h in hovers_s]
    rows = []
    for j, h in enumerate(hovers_s):
        cells = [per_seed[s][j] for s in seeds]
        devs = [d for _, d in cells if not math.isnan(d)]
        rows.append(HoverRow(float(h), float(np.mean([n for n, _ in cells])),
                             float(np.mean(devs)) if devs else math.nan, len(devs), len(devs) < len(cells)))
    valid = [r for r in rows if not math.isnan(r.mrd)]
    best = min(valid, key=lambda r: (r.mrd, r.hover_s)).hover_s if valid else math.nan
    return HoverSweep(rows, best, {str(k): v for k, v in per_seed.items()})


def rows_csv(rows: Sequence, columns: Sequence[str]) -> str:
    buf = io.StringIO()
    buf.write(SWEEP_CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        out = []
        for c in columns:
            v = getattr(r, c)
            out.append(repr(v) if isinstance(v, float) else v)
        w.writerow(out)
    return buf.getvalue()


INTERVAL_COLUMNS = ("sense_min", "upload_min", "battery_hours", "mrd", "energy_units",
                    "energy_mAh_per_device_day", "seeds", "flagged")
AERIAL_COLUMNS = ("interval_h", "flights_per_day", "energy_per_flight_J", "uav_energy_per_day_J", "mrd",
                  "seeds", "default_band", "flagged")
HOVER_COLUMNS = ("hover_s", "n_positions_visited", "mrd", "seeds", "flagged")
