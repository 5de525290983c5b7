"""Short-term prediction: the fitting regressor with time as a fourth axis.

A pair's features are the screened neighbour block at the base time (the
last step with data), the signed offset to the label time, and lagged
weather at the label time.  The skip path is the inverse-distance estimate
at the base time, so a zero network reproduces persistence of the fitted
field.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .field_model import WeatherRecord
from .fitting import (
    EPSILON, FIT_SPEC, Dataset, FitModel, Normalizer, ResidualHead, ScreeningError, ScreeningParams,
    anchor_value, feature_dim, feature_vector, screen, train_head,
)
from .mlp import Mlp, MlpSpec

log = logging.getLogger(__name__)

MAX_HORIZON_S = 7200.0
PRED_CSV_SCHEMA = "# schema: agsense.pred_errors/1"
PRED_METHODS = ("screened_mlp", "persistence")


class WeatherGapError(ValueError):
    pass


@dataclass(frozen=True)
class WeatherFeatureSpec:
    wind: bool = True
    humidity: bool = True
    temperature: bool = True
    lag_steps: int = 1

    def __post_init__(self):
        if self.lag_steps < 1:
            raise ValueError("lag_steps must be >= 1")

    @property
    def channels(self) -> int:
        return 3 * self.wind + self.humidity + self.temperature

    @property
    def width(self) -> int:
        return self.channels * self.lag_steps


@dataclass(frozen=True)
class PredictionQuery:
    position: tuple[float, float, float]
    base_time: float
    horizon: float

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")


class WeatherTrace:
    """Held weather lookup that refuses to bridge gaps longer than ``max_gap``."""

    def __init__(self, records: Sequence[WeatherRecord], max_gap: float | None = None):
        self.records = tuple(sorted(records, key=lambda r: r.time))
        if not self.records:
            raise ValueError("empty weather trace")
        self.times = np.array([r.time for r in self.records])
        if max_gap is None:
            steps = np.diff(self.times)
            max_gap = 2.0 * float(np.median(steps)) if len(steps) else math.inf
        self.max_gap = max_gap

    def at(self, t: float, forecast: bool = False) -> WeatherRecord:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        if i < 0 or t - self.times[i] > self.max_gap:
            raise WeatherGapError(f"no weather record covers t={t}")
        rec = self.records[i]
        return dataclasses.replace(rec, forecast=True) if forecast and not rec.forecast else rec


def weather_features(trace: WeatherTrace, label_time: float, step: float, wspec: WeatherFeatureSpec,
                     forecast: bool = False) -> list[float]:
    out = []
    for lag in range(wspec.lag_steps):
        rec = trace.at(label_time - lag * step, forecast=forecast)
        if wspec.wind:
            out.extend(rec.wind)
        if wspec.humidity:
            out.append(rec.humidity)
        if wspec.temperature:
            out.append(rec.temperature)
    return out


def prediction_dim(screening: ScreeningParams, wspec: WeatherFeatureSpec) -> int:
    return feature_dim(screening) + 1 + wspec.width


def prediction_features(ds: Dataset, position, base_idx: int, slots, screening: ScreeningParams,
                        trace: WeatherTrace, wspec: WeatherFeatureSpec, dt: float,
                        forecast: bool = False) -> np.ndarray:
    label_time = float(ds.times[base_idx]) + dt
    base = feature_vector(ds, position, base_idx, slots, screening, label_time=label_time)
    wx = weather_features(trace, label_time, ds.step, wspec, forecast)
    return np.concatenate([base, [dt], wx])


@dataclass
class PredictionSet:
    X: np.ndarray
    y: np.ndarray
    anchor: np.ndarray
    meta: list[tuple[int, int, int]]  # (location row, base index, horizon steps)
    skipped_weather: int = 0
    skipped_screen: int = 0


def build_prediction_set(ds: Dataset, trace: WeatherTrace, screening: ScreeningParams,
                         wspec: WeatherFeatureSpec, horizon_steps: Sequence[int],
                         last_index: int | None = None) -> PredictionSet:
    """Pairs (history ending at base b, label at b + m) for every m in ``horizon_steps``.

    Labels never go past ``last_index``.  For m = 0 the target is left out
    of its own screen, as in spatial fitting; for m > 0 its own past is
    legitimate input.
    """
    last = len(ds.times) - 1 if last_index is None else last_index
    X, y, anchor, meta = [], [], [], []
    skip_w = skip_s = 0
    for b in range(last + 1):
        for loc in range(len(ds.ids)):
            cache = {}
            for m in horizon_steps:
                if m < 0:
                    raise ValueError("horizon steps must be >= 0")
                if b + m > last or np.isnan(ds.values[loc, b + m]):
                    continue
                excl = loc if m == 0 else None
                if excl not in cache:
                    try:
                        cache[excl] = screen(ds, ds.positions[loc], b, screening, exclude=excl)
                    except ScreeningError:
                        cache[excl] = None
                slots = cache[excl]
                if slots is None:
                    skip_s += 1
                    continue
                try:
                    x = prediction_features(ds, ds.positions[loc], b, slots, screening, trace, wspec, m * ds.step)
                except WeatherGapError:
                    skip_w += 1
                    continue
                X.append(x)
                y.append(ds.values[loc, b + m])
                anchor.append(anchor_value(ds, ds.positions[loc], b, slots, screening))
                meta.append((loc, b, m))
    dim = prediction_dim(screening, wspec)
    return PredictionSet(np.array(X).reshape(-1, dim), np.array(y), np.array(anchor), meta, skip_w, skip_s)


@dataclass
class PredictModel:
    screening: ScreeningParams
    wspec: WeatherFeatureSpec
    head: ResidualHead
    max_horizon: float = MAX_HORIZON_S
    extra: dict = field(default_factory=dict)

    def predict_features(self, X, anchor) -> np.ndarray:
        return self.head.predict(X, anchor, self.screening)

    @classmethod
    def from_fit_model(cls, model: FitModel, wspec: WeatherFeatureSpec,
                       max_horizon: float = MAX_HORIZON_S) -> "PredictModel":
        """Lift a spatial model: the new time and weather inputs get zero weights."""
        h = model.head
        extra = 1 + wspec.width
        W0 = h.net.weights[0]
        weights = [np.vstack([W0, np.zeros((extra, W0.shape[1]))]), *h.net.weights[1:]]
        net = Mlp(weights, list(h.net.biases), h.net.activation)
        norm = Normalizer(np.concatenate([h.features.mean, np.zeros(extra)]),
                          np.concatenate([h.features.scale, np.ones(extra)]))
        return cls(model.screening, wspec, ResidualHead(net, norm, h.label_scale, h.target_range), max_horizon)


def train_predictor(pairs: PredictionSet, screening: ScreeningParams, wspec: WeatherFeatureSpec,
                    spec: MlpSpec = FIT_SPEC, max_horizon: float = MAX_HORIZON_S) -> PredictModel:
    head, loss = train_head(pairs.X, pairs.y, pairs.anchor, screening, spec)
    return PredictModel(screening, wspec, head, max_horizon, {"final_loss": loss})


def predict(query: PredictionQuery, ds: Dataset, trace: WeatherTrace, model: PredictModel) -> float:
    """Model value at ``base_time + horizon`` using forecast weather from the trace."""
    if query.horizon > model.max_horizon:
        raise ValueError(f"horizon {query.horizon} s exceeds max_horizon {model.max_horizon} s")
    b = ds.time_index(query.base_time)
    slots = screen(ds, query.position, b, model.screening)
    try:
        x = prediction_features(ds, query.position, b, slots, model.screening, trace, model.wspec,
                                query.horizon, forecast=True)
    except WeatherGapError as exc:
        raise ValueError(f"missing weather forecast: {exc}") from exc
    a = anchor_value(ds, query.position, b, slots, model.screening)
    return float(model.predict_features(x[None, :], [a])[0])


@dataclass(frozen=True)
class PredRow:
    method: str
    horizon_s: float
    mrd: float
    n: int
    dim_tag: str  # 3d: every location, 2d: ground-level slice


def default_cuts(n_times: int, lookback: int, n_cuts: int = 3) -> list[int]:
    lo = max(lookback + 1, n_times // 2)
    hi = n_times - 2
    if hi < lo:
        return []
    return sorted(set(int(round(c)) for c in np.linspace(lo, hi, n_cuts)))


def evaluate_prediction(ds: Dataset, trace: WeatherTrace, horizons: Sequence[float],
                        methods: Sequence[str] = PRED_METHODS, seed: int = 0,
                        screening: ScreeningParams | None = None, wspec: WeatherFeatureSpec | None = None,
                        spec: MlpSpec | None = None, cuts: Sequence[int] | None = None,
                        max_horizon: float = MAX_HORIZON_S, per_horizon: bool = True) -> list[PredRow]:
    """Walk-forward relative deviation per horizon.

    At each cut the model trains only on labels at or before the cut, then
    predicts every measured location at cut + horizon.  Persistence holds
    the location's own value at the cut.  With ``per_horizon`` each horizon
    gets its own model (direct strategy); otherwise one model covers all.
    """
    screening = screening or ScreeningParams()
    wspec = wspec or WeatherFeatureSpec()
    spec = dataclasses.replace(spec or FIT_SPEC, init_seed=seed)
    unknown = set(methods) - set(PRED_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if list(horizons) != sorted(horizons) or any(h <= 0 or h > max_horizon for h in horizons):
        raise ValueError("horizons must be ascending and within (0, max_horizon]")
    steps = []
    for h in horizons:
        m = h / ds.step
        if abs(m - round(m)) > 1e-9:
            raise ValueError(f"horizon {h} s is not a multiple of the data step {ds.step} s")
        steps.append(int(round(m)))
    cuts = default_cuts(len(ds.times), screening.lookback) if cuts is None else list(cuts)
    ground = ds.positions[:, 2] == ds.positions[:, 2].min()
    errs: dict[tuple[str, int, str], list[float]] = {}
    for cut in cuts:
        live = [m for m in steps if cut + m < len(ds.times)]
        for m in steps:
            if m not in live:
                log.info("horizon %s s dropped at cut %d: no data after it", m * ds.step, cut)
        if not live:
            continue
        models = {}
        if "screened_mlp" in methods:
            groups = [[m] for m in live] if per_horizon else [steps]
            for g in groups:
                pairs = build_prediction_set(ds, trace, screening, wspec, g, last_index=cut)
                model = train_predictor(pairs, screening, wspec, spec, max_horizon)
                models.update({m: model for m in g})
        for loc in range(len(ds.ids)):
            base_val = ds.values[loc, cut]
            try:
                slots = screen(ds, ds.positions[loc], cut, screening)
            except ScreeningError:
                continue
            for m in live:
                truth = ds.values[loc, cut + m]
                if np.isnan(truth):
                    continue
                preds = {}
                if "persistence" in methods and not np.isnan(base_val):
                    preds["persistence"] = base_val
                model = models.get(m)
                if model is not None:
                    try:
                        x = prediction_features(ds, ds.positions[loc], cut, slots, screening, trace, wspec,
                                                m * ds.step, forecast=True)
                    except WeatherGapError:
                        continue
                    a = anchor_value(ds, ds.positions[loc], cut, slots, screening)
                    preds["screened_mlp"] = float(model.predict_features(x[None, :], [a])[0])
                if len(preds) < len(set(methods)):
                    continue  # score every method on the same cases
                for meth, p in preds.items():
                    dev = abs(p - truth) / max(truth, EPSILON)
                    errs.setdefault((meth, m, "3d"), []).append(dev)
                    if ground[loc]:
                        errs.setdefault((meth, m, "2d"), []).append(dev)
    rows = [PredRow(meth, m * ds.step, float(np.mean(v)), len(v), tag) for (meth, m, tag), v in errs.items()]
    rows.sort(key=lambda r: (r.dim_tag, r.method, r.horizon_s))
    return rows


def deviation_table_csv(rows: Sequence[PredRow]) -> str:
    buf = io.StringIO()
    buf.write(PRED_CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "horizon_s", "mrd", "n", "dim_tag"])
    for r in rows:
        w.writerow([r.method, repr(r.horizon_s), repr(r.mrd), r.n, r.dim_tag])
    return buf.getvalue()
