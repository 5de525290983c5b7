"""Entropy-driven selection of ground sensor locations.

Each candidate location carries a histogram of surveyed values.  For a
selected (measured) subset, label propagation over a Gaussian affinity graph
expresses every unmeasured location's distribution as a mixture of the
measured histograms; the deployment objective is the mean Shannon entropy of
those mixtures.  :func:`greedy_swap` improves a selection one swap at a time.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

N_BINS = 16
SIGMA_P = 0.5
# swaps must beat rounding noise to count as a decrease
MIN_DECREASE = 1e-12


@dataclass
class CandidateSet:
    ids: list
    positions: np.ndarray  # (N, 3)
    histograms: np.ndarray  # (N, B), rows sum to 1
    bin_edges: np.ndarray  # (B + 1,)
    series: np.ndarray | None = None  # (N, T) survey values

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.histograms = np.asarray(self.histograms, dtype=float)
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        n, b = self.histograms.shape
        if n < 2 or b < 2:
            raise ValueError("need N >= 2 locations and B >= 2 bins")
        if len(self.ids) != n or len(self.positions) != n:
            raise ValueError("ids, positions and histograms disagree on N")
        if len(self.bin_edges) != b + 1 or np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin_edges must be strictly increasing with B + 1 entries")
        if np.any(self.histograms < 0) or np.any(np.abs(self.histograms.sum(axis=1) - 1) > 1e-9):
            raise ValueError("every histogram must be non-negative and sum to 1")

    @property
    def n(self) -> int:
        return len(self.ids)

    @classmethod
    def from_series(cls, ids: Sequence, positions, series, n_bins: int = N_BINS) -> "CandidateSet":
        """Equal-width histograms over the global survey range."""
        series = np.asarray(series, dtype=float)
        lo, hi = float(np.nanmin(series)), float(np.nanmax(series))
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
        hists = []
        for row in series:
            row = row[~np.isnan(row)]
            h, _ = np.histogram(row, bins=edges)
            hists.append(h / h.sum() if h.sum() else np.full(n_bins, 1.0 / n_bins))
        return cls(list(ids), positions, np.array(hists), edges, series)


def _correlation_distance(series: np.ndarray | None, n: int) -> np.ndarray:
    if series is None:
        return np.zeros((n, n))
    rho = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            a, b = series[i], series[j]
            ok = ~(np.isnan(a) | np.isnan(b))
            a, b = a[ok] - a[ok].mean(), b[ok] - b[ok].mean()
            den = math.sqrt(float(a @ a) * float(b @ b))
            r = float(a @ b) / den if den > 0 else 0.0
            rho[i, j] = 1.0 - r
    return rho


def default_sigma_d(cands: CandidateSet) -> float:
    d = [np.linalg.norm(cands.positions[i] - cands.positions[j]) for i, j in combinations(range(cands.n), 2)]
    s = float(np.median(d))
    return s if s > 0 else 1.0


def transition_matrix(cands: CandidateSet, sigma_d: float | None = None, sigma_p: float = SIGMA_P) -> np.ndarray:
    """Row-normalised Gaussian-product affinities with a zero diagonal.

    A location with no affinity to anything gets uniform weights over the
    others.
    """
    sigma_d = default_sigma_d(cands) if sigma_d is None else sigma_d
    if not (sigma_d > 0 and sigma_p > 0):
        raise ValueError("sigma_d and sigma_p must be > 0")
    diff = cands.positions[:, None, :] - cands.positions[None, :, :]
    d2 = (diff**2).sum(axis=2)
    rho = _correlation_distance(cands.series, cands.n)
    A = np.exp(-d2 / (2 * sigma_d**2)) * np.exp(-(rho**2) / (2 * sigma_p**2))
    np.fill_diagonal(A, 0.0)
    rows = A.sum(axis=1)
    for i in np.flatnonzero(rows == 0):
        log.info("location %s has no affinity; using uniform weights", cands.ids[i])
        A[i] = 1.0
        A[i, i] = 0.0
    return A / A.sum(axis=1, keepdims=True)


@dataclass
class WeightMatrix:
    W: np.ndarray  # (N, N)
    selected: tuple[int, ...]
    converged: bool
    iterations: int
    residual: float

    @property
    def unmeasured(self) -> list[int]:
        chosen = set(self.selected)
        return [i for i in range(len(self.W)) if i not in chosen]


def learn_weights(cands: CandidateSet, selected: Sequence[int], sigma_d: float | None = None,
                  sigma_p: float = SIGMA_P, tol: float = 1e-6, max_iter: int = 500) -> WeightMatrix:
    """Label propagation with measured rows clamped.

    Iteration stops once the per-step change and its geometric tail bound both
    fall under ``tol``, so the result sits within ``tol`` of the fixed point.

    Unmeasured rows of the returned matrix hold absorption probabilities onto
    the measured set; measured rows keep their transition weights.
    """
    sel = tuple(sorted(set(int(i) for i in selected)))
    if not sel:
        raise ValueError("selected set is empty")
    P = transition_matrix(cands, sigma_d, sigma_p)
    W = P.copy()
    U = [i for i in range(cands.n) if i not in sel]
    if not U:
        return WeightMatrix(W, sel, True, 0, 0.0)
    L = list(sel)
    P_UU = P[np.ix_(U, U)]
    P_UL = P[np.ix_(U, L)]
    F = np.full((len(U), len(L)), 1.0 / len(L))
    contraction = float(P_UU.sum(axis=1).max()) if len(U) else 0.0
    change = bound = math.inf
    it = 0
    while it < max_iter:
        it += 1
        F_new = P_UU @ F + P_UL
        drift = np.abs(F_new.sum(axis=1) - 1.0).max()
        if drift > 1e-9:
            raise FloatingPointError(f"row-stochasticity lost at iteration {it} (drift {drift:.3g})")
        prev, change = change, float(np.abs(F_new - F).max())
        F = F_new
        # geometric tail bound on the distance to the fixed point
        rate = contraction if contraction < 1 else (change / prev if prev > 0 and math.isfinite(prev) else 1.0)
        bound = 0.0 if change == 0 else change * rate / (1 - rate) if rate < 1 else math.inf
        if change < tol and bound < tol:
            break
    converged = change < tol and bound < tol
    if not converged:
        log.warning("label propagation hit %d iterations with residual %.3g", max_iter, change)
    W[np.ix_(U, range(cands.n))] = 0.0
    W[np.ix_(U, L)] = F
    return WeightMatrix(W, sel, converged, it, change)


def _entropy(q: np.ndarray) -> float:
    q = q[q > 0]
    return float(-(q * np.log(q)).sum())


def mean_entropy(cands: CandidateSet, weights: WeightMatrix, selected: Sequence[int] | None = None) -> float:
    """Mean entropy (nats) of unmeasured locations' mixture distributions."""
    sel = weights.selected if selected is None else tuple(sorted(set(selected)))
    U = [i for i in range(cands.n) if i not in sel]
    if not U:
        return 0.0
    q = weights.W[np.ix_(U, list(sel))] @ cands.histograms[list(sel)]
    bad = np.abs(q.sum(axis=1) - 1.0)
    if bad.max() > 1e-6:
        raise ValueError(f"mixture does not normalise (off by {bad.max():.3g}); weights corrupt")
    return float(np.mean([_entropy(row) for row in q]))


def subset_entropy(cands: CandidateSet, selected: Sequence[int], sigma_d=None, sigma_p=SIGMA_P) -> float:
    return mean_entropy(cands, learn_weights(cands, selected, sigma_d, sigma_p))


@dataclass
class DeploymentPlan:
    selected: tuple[int, ...]
    mean_entropy: float
    swaps: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def to_json(self, cands: CandidateSet | None = None) -> str:
        ids = [cands.ids[i] for i in self.selected] if cands is not None else list(self.selected)
        trace = [self.swaps[0]["before"]] if self.swaps else [self.mean_entropy]
        trace += [s["after"] for s in self.swaps]
        return json.dumps({
            "selected": ids,
            "selected_index": list(self.selected),
            "mean_entropy": self.mean_entropy,
            "entropy_trace": trace,
            "swaps": self.swaps,
            "params": self.params,
        }, indent=2, sort_keys=True, default=str)


def greedy_swap(cands: CandidateSet, n: int, initial: Sequence[int] | None = None,
                sigma_d: float | None = None, sigma_p: float = SIGMA_P, seed: int = 0) -> DeploymentPlan:
    """Steepest single-swap descent on mean entropy.

    Each round scores every (selected, unselected) exchange and applies the
    largest decrease; ties favour the lowest incoming then lowest outgoing
    index.  Stops when no exchange lowers the entropy.
    """
    if not 1 <= n < cands.n:
        raise ValueError(f"n={n} must satisfy 1 <= n < N={cands.n}")
    sigma_d = default_sigma_d(cands) if sigma_d is None else sigma_d
    if initial is None:
        rng = np.random.default_rng(seed)
        current = tuple(sorted(int(i) for i in rng.choice(cands.n, size=n, replace=False)))
    else:
        current = tuple(sorted(set(int(i) for i in initial)))
        if len(current) != n or not all(0 <= i < cands.n for i in current):
            raise ValueError("initial set must hold n distinct valid indices")
    score = subset_entropy(cands, current, sigma_d, sigma_p)
    swaps = []
    while True:
        best = None
        for out in current:
            for inc in range(cands.n):
                if inc in current:
                    continue
                trial = tuple(sorted((set(current) - {out}) | {inc}))
                drop = score - subset_entropy(cands, trial, sigma_d, sigma_p)
                if drop > MIN_DECREASE:
                    key = (-drop, inc, out)
                    if best is None or key < best[0]:
                        best = (key, trial, out, inc)
        if best is None:
            break
        _, trial, out, inc = best
        after = subset_entropy(cands, trial, sigma_d, sigma_p)
        swaps.append({"out": out, "in": inc, "before": score, "after": after})
        current, score = trial, after
    return DeploymentPlan(current, score, swaps, {"n": n, "sigma_d": sigma_d, "sigma_p": sigma_p, "seed": seed})


def read_survey_csv(text: str) -> CandidateSet:
    """Long-format survey rows ``location_id,x,y,z,t,value``."""
    rows = list(csv.DictReader(ln for ln in text.splitlines() if ln and not ln.startswith("#")))
    ids = sorted({r["location_id"] for r in rows})
    times = sorted({float(r["t"]) for r in rows})
    ti = {t: k for k, t in enumerate(times)}
    pos = {}
    series = np.full((len(ids), len(times)), np.nan)
    row_of = {d: i for i, d in enumerate(ids)}
    for r in rows:
        pos[r["location_id"]] = (float(r["x"]), float(r["y"]), float(r["z"]))
        series[row_of[r["location_id"]], ti[float(r["t"])]] = float(r["value"])
    return CandidateSet.from_series(ids, [pos[i] for i in ids], series)


def write_survey_csv(ids, positions, times, series) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["location_id", "x", "y", "z", "t", "value"])
    for i, loc in enumerate(ids):
        for k, t in enumerate(times):
            w.writerow([loc, *map(repr, map(float, positions[i])), repr(float(t)), repr(float(series[i][k]))])
    return buf.getvalue()
