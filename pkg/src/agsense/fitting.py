"""Spatial fitting: kNN screening feeding a neural regressor, plus baselines.

Measured data lives in a :class:`Dataset`, a location-by-time table on a
regular time grid (missing or rejected readings are NaN).  For a query
point the screen picks the ``k_spatial`` nearest measured locations and then
fills ``k_temporal`` more slots with the locations whose recent first
differences correlate best with the mean pattern of the spatial set.  Each
slot contributes its offset from the query and its last ``history_len``
values.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Collection, Sequence

import numpy as np

from .mlp import Mlp, MlpSpec, train
from .netsim import Sample

log = logging.getLogger(__name__)

MODEL_FORMAT = "agsense.fitmodel/2"
ERROR_CSV_SCHEMA = "# schema: agsense.fit_errors/1"
EPSILON = 1.0
DAY = 86400.0
AUG_REPLICAS = 4
AUG_DROP = 0.3
# fewer epochs than the generic default: augmented sets are AUG_REPLICAS times larger
FIT_SPEC = MlpSpec(epochs=50, weight_decay=1e-2)


class ScreeningError(ValueError):
    """Screening is infeasible; ``reason`` is ``no_data`` or ``no_neighbors``."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class ScreeningParams:
    k_spatial: int = 4
    k_temporal: int = 2
    history_len: int = 2
    pattern_window: int = 6

    def __post_init__(self):
        if self.k_spatial < 1 or self.k_temporal < 1:
            raise ValueError("k_spatial and k_temporal must be >= 1")
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")
        if self.pattern_window < 2:
            raise ValueError("pattern_window must be >= 2")

    @property
    def slots(self) -> int:
        return self.k_spatial + self.k_temporal

    @property
    def lookback(self) -> int:
        """Steps of history needed before the query time."""
        return max(self.history_len - 1, self.pattern_window)


@dataclass
class Dataset:
    ids: list[str]
    positions: np.ndarray  # (L, 3)
    times: np.ndarray  # (T,) seconds, regular spacing
    values: np.ndarray  # (L, T), NaN where missing

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.ids), len(self.times))

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 1.0

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], step_s: float, t0: float = 0.0,
                     value: str = "pm25", skip_flags: Sequence[str] = ("outlier",)) -> "Dataset":
        """Grid samples by location (device id) and time bucket."""
        kept = [s for s in samples if s.flag not in skip_flags]
        ids = sorted({s.device_id for s in samples})
        pos = {}
        for s in samples:
            pos.setdefault(s.device_id, s.position)
        if not kept:
            return cls(ids, np.array([pos[i] for i in ids]), np.array([t0]), np.full((len(ids), 1), np.nan))
        n_t = int(round((max(s.time for s in kept) - t0) / step_s)) + 1
        vals = np.full((len(ids), n_t), np.nan)
        row = {d: i for i, d in enumerate(ids)}
        for s in kept:
            k = int(round((s.time - t0) / step_s))
            if k >= 0:
                vals[row[s.device_id], k] = getattr(s, value)
        return cls(ids, np.array([pos[i] for i in ids]), t0 + step_s * np.arange(n_t), vals)

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = list(rows)
        return Dataset([self.ids[i] for i in rows], self.positions[rows], self.times, self.values[rows])

    def time_index(self, t: float) -> int:
        k = int(round((t - self.times[0]) / self.step))
        if k < 0 or k >= len(self.times) or not math.isclose(self.times[k], t, abs_tol=1e-6):
            raise ScreeningError("no_data", f"time {t} is not on the dataset grid")
        return k


def spatial_knn(query: Sequence[float], positions: np.ndarray, ids: Sequence, k: int) -> list[int]:
    """Row indices of the k nearest locations; distance ties go to the lower id."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if k > len(positions):
        raise ValueError(f"k={k} exceeds the {len(positions)} known locations")
    d = np.sqrt(((positions - np.asarray(query, dtype=float)) ** 2).sum(axis=1))
    order = sorted(range(len(d)), key=lambda i: (d[i], ids[i]))
    return order[:k]


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0 or nb == 0:
        return None
    return float(a @ b) / (na * nb)


def temporal_knn(reference: np.ndarray, histories: np.ndarray, ids: Sequence, k: int | None = None,
                 window: int | None = None) -> list[int]:
    """Rank candidates by correlation of their first differences with ``reference``.

    ``reference`` is a first-difference series of length ``window``;
    ``histories`` holds each candidate's last ``window + 1`` values (rows with
    NaN are skipped).  Zero-variance candidates rank after all others.
    """
    window = len(reference) if window is None else window
    scored = []
    for i, h in enumerate(histories):
        h = np.asarray(h, dtype=float)[-(window + 1):]
        if len(h) < window + 1 or np.isnan(h).any():
            continue
        r = _pearson(np.diff(h), np.asarray(reference, dtype=float))
        scored.append((0 if r is not None else 1, -(r if r is not None else 0.0), ids[i], i))
    if not scored:
        raise ScreeningError("no_neighbors", "no candidate has enough history for temporal screening")
    scored.sort()
    out = [s[3] for s in scored]
    return out if k is None else out[:k]


def screen(ds: Dataset, position: Sequence[float], t_idx: int, params: ScreeningParams,
           exclude: int | Collection[int] | None = None) -> list[int]:
    """Merged spatial-then-temporal neighbour slots for a query.

    ``exclude`` removes one location row (or several) from the candidates.
    """
    if t_idx < 0 or t_idx >= len(ds.times):
        raise ScreeningError("no_data", f"time index {t_idx} outside dataset")
    h = params.history_len
    lo = t_idx - h + 1
    if lo < 0:
        raise ScreeningError("no_data", "not enough history before query time")
    ok = ~np.isnan(ds.values[:, lo:t_idx + 1]).any(axis=1)
    if exclude is not None:
        ok[list(exclude) if isinstance(exclude, Collection) else exclude] = False
    cand = np.flatnonzero(ok)
    if len(cand) == 0:
        raise ScreeningError("no_data", f"no measured values at time index {t_idx}")
    if len(cand) < params.slots:
        raise ScreeningError("no_neighbors", f"{len(cand)} candidates for {params.slots} slots")
    near = [int(cand[i]) for i in spatial_knn(position, ds.positions[cand], [ds.ids[c] for c in cand],
                                             params.k_spatial)]
    w = params.pattern_window
    if t_idx - w < 0:
        raise ScreeningError("no_data", "not enough history for temporal screening")
    block = ds.values[:, t_idx - w:t_idx + 1]
    ref_rows = [r for r in near if not np.isnan(block[r]).any()]
    if not ref_rows:
        raise ScreeningError("no_neighbors", "spatial set lacks pattern history")
    reference = np.diff(block[ref_rows], axis=1).mean(axis=0)
    ranked = [int(cand[i]) for i in temporal_knn(reference, block[cand], [ds.ids[c] for c in cand], window=w)]
    slots = list(near)
    for r in ranked:
        if len(slots) == params.slots:
            break
        if r not in slots:
            slots.append(r)
    if len(slots) < params.slots:
        raise ScreeningError("no_neighbors", "temporal screen could not fill its slots")
    return slots


def time_encoding(t: float) -> list[float]:
    phase = 2 * math.pi * (t % DAY) / DAY
    return [math.sin(phase), math.cos(phase)]


def feature_vector(ds: Dataset, position: Sequence[float], t_idx: int, slots: Sequence[int],
                   params: ScreeningParams, label_time: float | None = None) -> np.ndarray:
    pos = np.asarray(position, dtype=float)
    h = params.history_len
    parts = []
    for r in slots:
        parts.extend(ds.positions[r] - pos)
        parts.extend(ds.values[r, t_idx - h + 1:t_idx + 1][::-1])
    parts.extend(time_encoding(ds.times[t_idx] if label_time is None else label_time))
    return np.array(parts, dtype=float)


def anchor_value(ds: Dataset, position: Sequence[float], t_idx: int, slots: Sequence[int],
                 params: ScreeningParams) -> float:
    """Inverse-distance mean of the spatial slots; the network learns the residual."""
    near = list(slots[:params.k_spatial])
    return baseline_idw(position, ds.positions[near], ds.values[near, t_idx], len(near))


def feature_dim(params: ScreeningParams) -> int:
    return params.slots * (3 + params.history_len) + 2


@dataclass
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    anchor: np.ndarray  # skip-path estimate the network corrects
    meta: list[tuple[int, int]]  # (location row, time index)
    skipped: int = 0


def build_training_set(ds: Dataset, params: ScreeningParams, time_indices: Sequence[int] | None = None,
                       replicas: int = 1, drop_prob: float = 0.0, seed: int = 0) -> TrainingSet:
    """One pair per measured (location, time); the target is left out of its own screen.

    With ``replicas > 1`` each extra copy of a pair is screened after hiding
    every other location independently with probability ``drop_prob``.  The
    network then sees each target against many neighbour layouts, which is
    what an unmeasured query looks like, instead of memorising one layout per
    training location.
    """
    if replicas < 1 or not 0.0 <= drop_prob < 1.0:
        raise ValueError("replicas must be >= 1 and drop_prob in [0, 1)")
    time_indices = range(len(ds.times)) if time_indices is None else time_indices
    rng = np.random.default_rng(seed)
    n_loc = len(ds.ids)
    X, y, anchor, meta = [], [], [], []
    skipped = 0
    for rep in range(replicas):
        for t in time_indices:
            for loc in range(n_loc):
                val = ds.values[loc, t]
                if np.isnan(val):
                    continue
                hidden = {loc}
                if rep > 0:
                    hidden.update(np.flatnonzero(rng.random(n_loc) < drop_prob).tolist())
                try:
                    slots = screen(ds, ds.positions[loc], t, params, exclude=hidden)
                except ScreeningError:
                    skipped += rep == 0
                    continue
                X.append(feature_vector(ds, ds.positions[loc], t, slots, params))
                y.append(val)
                anchor.append(anchor_value(ds, ds.positions[loc], t, slots, params))
                meta.append((loc, t))
    dim = feature_dim(params)
    return TrainingSet(np.array(X).reshape(-1, dim), np.array(y), np.array(anchor), meta, skipped)


@dataclass
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Normalizer":
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean, scale)

    def apply(self, X):
        return (np.asarray(X) - self.mean) / self.scale

    def invert(self, Z):
        return np.asarray(Z) * self.scale + self.mean


def ratio_inputs(X: np.ndarray, anchor: np.ndarray, screening: ScreeningParams) -> np.ndarray:
    """Replace slot history values by log((v + 1) / (anchor + 1)).

    Offsets, the time encoding and any trailing columns pass through. Working
    in ratios keeps unseen concentration levels inside the training range.
    """
    X = np.array(X, dtype=float, copy=True)
    a = np.asarray(anchor, dtype=float).reshape(-1, 1)
    w = 3 + screening.history_len
    for s in range(screening.slots):
        cols = slice(s * w + 3, s * w + w)
        X[:, cols] = np.log((X[:, cols] + EPSILON) / (a + EPSILON))
    return X


def ratio_target(y: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    return np.log((np.asarray(y) + EPSILON) / (np.asarray(anchor) + EPSILON))


@dataclass
class ResidualHead:
    """Network, normalisers and output clamp shared by fitting and prediction.

    The network predicts the standardised log ratio of the target to an
    inverse-distance mean of the spatial slots. Outputs are clamped to the
    ratio range seen in training.
    """

    net: Mlp
    features: Normalizer
    label_scale: float
    target_range: tuple[float, float]

    def predict(self, X: np.ndarray, anchor: np.ndarray, screening: ScreeningParams) -> np.ndarray:
        anchor = np.asarray(anchor, dtype=float)
        Z = self.features.apply(ratio_inputs(np.atleast_2d(X), anchor, screening))
        out = np.clip(self.net.predict(Z) * self.label_scale, *self.target_range)
        return np.maximum((anchor + EPSILON) * np.exp(out) - EPSILON, 0.0)

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "feature_mean": self.features.mean.tolist(),
                "feature_scale": self.features.scale.tolist(), "label_scale": self.label_scale,
                "target_range": list(self.target_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualHead":
        return cls(Mlp.from_dict(d["net"]), Normalizer(np.array(d["feature_mean"]), np.array(d["feature_scale"])),
                   d["label_scale"], tuple(d["target_range"]))


def train_head(X: np.ndarray, y: np.ndarray, anchor: np.ndarray, screening: ScreeningParams,
               spec: MlpSpec) -> tuple[ResidualHead, float]:
    if len(y) == 0:
        raise ValueError("no training pairs")
    Xr = ratio_inputs(X, anchor, screening)
    r = ratio_target(y, anchor)
    norm = Normalizer.fit(Xr)
    scale = float(r.std())
    scale = scale if scale > 1e-12 else 1.0
    net, hist = train(norm.apply(Xr), r / scale, spec)
    head = ResidualHead(net, norm, scale, (float(r.min()), float(r.max())))
    return head, hist[-1] if hist else math.nan


@dataclass
class FitModel:
    screening: ScreeningParams
    head: ResidualHead
    spec: MlpSpec
    final_loss: float
    extra: dict = field(default_factory=dict)

    def predict_features(self, X: np.ndarray, anchor: np.ndarray) -> np.ndarray:
        return self.head.predict(X, anchor, self.screening)

    def dumps(self) -> str:
        return json.dumps({
            "format": MODEL_FORMAT,
            "screening": vars(self.screening),
            "spec": {**vars(self.spec), "layer_widths": list(self.spec.layer_widths)},
            "head": self.head.to_dict(),
            "final_loss": self.final_loss,
            "extra": self.extra,
        }, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "FitModel":
        d = json.loads(text)
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        spec = dict(d["spec"])
        spec["layer_widths"] = tuple(spec["layer_widths"])
        return cls(ScreeningParams(**d["screening"]), ResidualHead.from_dict(d["head"]),
                   MlpSpec(**spec), d["final_loss"], d.get("extra", {}))


def train_model(pairs: TrainingSet, spec: MlpSpec, screening: ScreeningParams | None = None) -> FitModel:
    screening = screening or ScreeningParams()
    head, loss = train_head(pairs.X, pairs.y, pairs.anchor, screening, spec)
    return FitModel(screening, head, spec, loss)


def fit_point(position: Sequence[float], time: float, ds: Dataset, model: FitModel) -> float:
    t_idx = ds.time_index(time)
    slots = screen(ds, position, t_idx, model.screening)
    x = feature_vector(ds, position, t_idx, slots, model.screening)
    return float(model.predict_features(x[None, :], [anchor_value(ds, position, t_idx, slots, model.screening)])[0])


def baseline_idw(query: Sequence[float], positions: np.ndarray, values: np.ndarray, k: int,
                 power: float = 2.0, ids: Sequence | None = None) -> float:
    """Inverse-distance-weighted mean of the k nearest values."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    values = np.asarray(values, dtype=float)
    ids = list(range(len(values))) if ids is None else ids
    near = spatial_knn(query, positions, ids, k)
    d = np.sqrt(((positions[near] - np.asarray(query, dtype=float)) ** 2).sum(axis=1))
    if (d == 0).any():
        return float(values[near][d == 0][0])
    w = d ** -power
    return float(w @ values[near] / w.sum())


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.maximum(np.atleast_2d(X) @ self.coef + self.intercept, 0.0)


def fit_mlr(X: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> LinearModel:
    """Least squares with intercept via ridge-regularised normal equations."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A = np.hstack([X, np.ones((len(X), 1))])
    G = A.T @ A
    reg = np.eye(G.shape[0]) * ridge
    reg[-1, -1] = 0.0
    M = G + reg
    if np.linalg.matrix_rank(M) < M.shape[0]:
        raise np.linalg.LinAlgError("design matrix is rank deficient even after ridge")
    beta = np.linalg.solve(M, A.T @ np.asarray(y, dtype=float))
    return LinearModel(beta[:-1], float(beta[-1]))


def baseline_mlr(pairs: TrainingSet, query_features: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    return fit_mlr(pairs.X, pairs.y, ridge).predict(query_features)


# --- holdout evaluation -------------------------------------------------------

METHODS = ("screened_mlp", "idw", "mlr", "pure_dnn")


@dataclass(frozen=True)
class ErrorRow:
    method: str
    rmse: float
    mrd: float
    n: int


def holdout_split(n_locations: int, fraction: float, seed: int, min_train: int) -> tuple[list[int], list[int]]:
    n_hold = int(round(n_locations * fraction))
    if n_hold < 1 or n_locations - n_hold < min_train:
        raise ValueError(f"holdout of {n_hold}/{n_locations} leaves fewer than {min_train} training locations")
    rng = np.random.default_rng(seed)
    held = sorted(int(i) for i in rng.choice(n_locations, size=n_hold, replace=False))
    train_rows = [i for i in range(n_locations) if i not in held]
    return train_rows, held


def _coord_features(positions: np.ndarray, times: np.ndarray) -> np.ndarray:
    enc = np.array([time_encoding(t) for t in times]).reshape(-1, 2)
    return np.hstack([positions, times[:, None] / DAY, enc])


def evaluate_fitting(ds: Dataset, holdout_fraction: float, methods: Sequence[str], seed: int,
                     screening: ScreeningParams | None = None, spec: MlpSpec | None = None,
                     idw_k: int = 6, idw_power: float = 2.0, eval_stride: int = 1,
                     replicas: int = AUG_REPLICAS, drop_prob: float = AUG_DROP,
                     mlr_augmented: bool = True) -> list[ErrorRow]:
    """Hold out whole locations, predict their values from the rest, tabulate errors.

    Held-out locations never enter features or labels of any training pair.
    MLR is fitted on the same (augmented) pairs as the network unless
    ``mlr_augmented`` is off.
    """
    screening = screening or ScreeningParams()
    spec = spec or FIT_SPEC
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    train_rows, held = holdout_split(len(ds.ids), holdout_fraction, seed,
                                     max(screening.slots + 1, screening.k_spatial))
    tr = ds.subset(train_rows)
    te = ds.subset(held)

    queries = []  # (held row, t_idx, slots)
    for t in range(0, len(ds.times), eval_stride):
        for h in range(len(held)):
            if np.isnan(te.values[h, t]):
                continue
            try:
                slots = screen(tr, te.positions[h], t, screening)
            except ScreeningError:
                continue
            queries.append((h, t, slots))
    if not queries:
        raise ValueError("no held-out value can be screened")
    truth = np.array([te.values[h, t] for h, t, _ in queries])
    Xq = np.array([feature_vector(tr, te.positions[h], t, s, screening) for h, t, s in queries])
    anchor_q = np.array([anchor_value(tr, te.positions[h], t, s, screening) for h, t, s in queries])

    preds: dict[str, np.ndarray] = {}
    pairs = None
    if {"screened_mlp", "mlr"} & set(methods):
        pairs = build_training_set(tr, screening, replicas=replicas, drop_prob=drop_prob, seed=seed)
    if "screened_mlp" in methods:
        model = train_model(pairs, spec, screening)
        preds["screened_mlp"] = model.predict_features(Xq, anchor_q)
    if "mlr" in methods:
        mlr_pairs = pairs if mlr_augmented else build_training_set(tr, screening)
        preds["mlr"] = baseline_mlr(mlr_pairs, Xq)
    if "idw" in methods:
        out = []
        for h, t, _ in queries:
            ok = ~np.isnan(tr.values[:, t])
            out.append(baseline_idw(te.positions[h], tr.positions[ok], tr.values[ok, t],
                                    min(idw_k, int(ok.sum())), idw_power,
                                    [tr.ids[i] for i in np.flatnonzero(ok)]))
        preds["idw"] = np.array(out)
    if "pure_dnn" in methods:
        rows, ts = np.nonzero(~np.isnan(tr.values))
        Xd = _coord_features(tr.positions[rows], tr.times[ts])
        norm = Normalizer.fit(Xd)
        yd = tr.values[rows, ts]
        mu, sd = float(yd.mean()), float(yd.std()) or 1.0
        net, _ = train(norm.apply(Xd), (yd - mu) / sd, spec)
        Xe = _coord_features(np.array([te.positions[h] for h, _, _ in queries]),
                             np.array([ds.times[t] for _, t, _ in queries]))
        preds["pure_dnn"] = np.maximum(net.predict(norm.apply(Xe)) * sd + mu, 0.0)

    rows_out = []
    for m in methods:
        err = preds[m] - truth
        rows_out.append(ErrorRow(m, float(np.sqrt(np.mean(err**2))),
                                 float(np.mean(np.abs(err) / np.maximum(truth, EPSILON))), len(truth)))
    rows_out.sort(key=lambda r: (r.rmse, r.method))
    return rows_out


def error_table_csv(rows: Sequence[ErrorRow]) -> str:
    buf = io.StringIO()
    buf.write(ERROR_CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "rmse", "mrd", "n"])
    for r in rows:
        w.writerow([r.method, repr(r.rmse), repr(r.mrd), r.n])
    return buf.getvalue()
