"""Glue between the simulator and the learning modules.

Every evaluation starts from what the server actually received, never from
the truth field directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .fitting import Dataset, ErrorRow, evaluate_fitting
from .netsim import SimulationTrace, run_simulation
from .prediction import PredRow, WeatherTrace, evaluate_prediction
from .preprocess import OutlierParams, preprocess
from .scenario import FittingCfg, PredictionCfg, Scenario

log = logging.getLogger(__name__)


@dataclass
class Observed:
    trace: SimulationTrace
    dataset: Dataset
    n_received: int
    n_outliers: int


def observe(scen: Scenario, seed: int, outliers: OutlierParams | None = None) -> Observed:
    """Simulate the ground network for one seed and grid the cleaned samples."""
    setup = scen.simulation_setup(seed, kinds=("ground",))
    trace = run_simulation(setup)
    cal = {d.device_id: d.calibration for d in setup.devices}
    samples = [r.sample for r in sorted(trace.received, key=lambda r: (r.sample.time, r.sample.device_id))]
    clean = preprocess(samples, cal, outliers or scen.outlier_params())
    step = (scen.cfg.fitting or FittingCfg()).step_s
    ds = Dataset.from_samples(clean, step, t0=step)
    n_out = sum(s.flag == "outlier" for s in clean)
    log.info("seed %d: %d samples received, %d flagged", seed, len(samples), n_out)
    return Observed(trace, ds, len(samples), n_out)


def fit_eval(scen: Scenario, seed: int, methods=("screened_mlp", "idw", "mlr")) -> list[ErrorRow]:
    f = scen.cfg.fitting or FittingCfg()
    ds = observe(scen, seed).dataset
    return evaluate_fitting(ds, f.holdout_fraction, methods, seed, scen.screening(), scen.mlp_spec(seed),
                            replicas=f.replicas, drop_prob=f.drop_prob)


def predict_eval(scen: Scenario, seed: int, methods=("screened_mlp", "persistence")) -> list[PredRow]:
    p = scen.cfg.prediction or PredictionCfg()
    ds = observe(scen, seed).dataset
    trace = WeatherTrace(scen.field_for(seed).weather)
    return evaluate_prediction(ds, trace, p.horizons_s, methods, seed, scen.screening(), scen.weather_spec(),
                               scen.mlp_spec(seed), max_horizon=p.max_horizon_s)
