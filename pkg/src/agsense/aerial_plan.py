"""UAV survey planning: coarse scan, importance points, budgeted greedy route.

The planner scans the airspace on a coarse lattice, fills gaps by inverse
distance weighting, marks cells that have steep gradients or are local
extrema, and then flies to the point with the best importance per joule
until the energy budget runs out.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .field_model import Field, GridSpec, sample_truth
from .fitting import baseline_idw
from .netsim import SensorModel

log = logging.getLogger(__name__)

TAU_S = 2.5
THETA_PERCENTILE = 75.0
PLAN_FORMAT = "agsense.flightplan/1"


@dataclass(frozen=True)
class ScanSample:
    cell: tuple[int, int, int]
    position: tuple[float, float, float]
    time: float
    value: float


@dataclass
class CoarseField:
    grid: GridSpec
    values: np.ndarray  # (nx, ny, nz)
    provenance: list[ScanSample] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.nx, self.grid.ny, self.grid.nz):
            raise ValueError(f"values shape {self.values.shape} does not match grid")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("coarse values must be finite and >= 0")

    def position(self, cell: Sequence[int]) -> tuple[float, float, float]:
        return tuple(float(i) * self.grid.cell_size for i in cell)


@dataclass(frozen=True)
class PdtParams:
    grad_threshold: float | None = None  # None: 75th percentile of |g|
    include_extrema: bool = True
    w_grad: float = 1.0
    w_ext: float = 1.0

    def __post_init__(self):
        if self.grad_threshold is not None and self.grad_threshold < 0:
            raise ValueError("grad_threshold must be >= 0")
        if self.w_grad < 0 or self.w_ext < 0 or (self.w_grad == 0 and self.w_ext == 0):
            raise ValueError("importance weights must be >= 0 and not both 0")


@dataclass(frozen=True)
class ImportancePoint:
    cell: tuple[int, int, int]
    position: tuple[float, float, float]
    kind: str  # gradient | extremum | both
    importance: float


@dataclass(frozen=True)
class UavEnergyModel:
    e_fly: float = 30.0  # J per metre
    e_hover: float = 200.0  # J per second
    budget: float = 900_000.0
    speed: float = 5.0  # m/s

    def __post_init__(self):
        if min(self.e_fly, self.e_hover, self.budget, self.speed) <= 0:
            raise ValueError("all UAV energy parameters must be > 0")


@dataclass
class FlightPlan:
    start: tuple[float, float, float]
    waypoints: list[ImportancePoint]
    hover_time_s: float
    legs: list[dict]  # per waypoint: distance_m, fly_J, hover_J
    budget: float

    @property
    def fly_energy(self) -> float:
        return float(sum(Fraction(leg["fly_J"]) for leg in self.legs))

    @property
    def hover_energy(self) -> float:
        return float(sum(Fraction(leg["hover_J"]) for leg in self.legs))

    def exact_total(self) -> Fraction:
        return sum((Fraction(leg["fly_J"]) + Fraction(leg["hover_J"]) for leg in self.legs), Fraction(0))

    @property
    def total_energy(self) -> float:
        return float(self.exact_total())

    def to_json(self) -> str:
        return json.dumps({
            "format": PLAN_FORMAT,
            "start": list(self.start),
            "hover_time_s": self.hover_time_s,
            "budget_J": self.budget,
            "waypoints": [{"cell": list(p.cell), "position": list(p.position), "kind": p.kind,
                           "importance": p.importance, **leg}
                          for p, leg in zip(self.waypoints, self.legs)],
            "ledger": {"fly_J": self.fly_energy, "hover_J": self.hover_energy, "total_J": self.total_energy},
        }, indent=2)


def serpentine_order(nx: int, ny: int, nz: int) -> list[tuple[int, int, int]]:
    """Lawnmower order: layers bottom-up, rows alternate in y per layer, x alternates per row.

    Consecutive cells are always face-adjacent.
    """
    order = []
    row = 0
    for k in range(nz):
        js = range(ny) if k % 2 == 0 else range(ny - 1, -1, -1)
        for j in js:
            xs = range(nx) if row % 2 == 0 else range(nx - 1, -1, -1)
            order.extend((i, j, k) for i in xs)
            row += 1
    return order


def coarse_scan(fld: Field, scan_grid: GridSpec, time: float, sensor: SensorModel | None = None,
                seed: int = 0) -> list[ScanSample]:
    """One reading per scan cell, in serpentine order, all at ``time``."""
    truth = fld.grid
    if scan_grid.cell_size < truth.cell_size:
        raise ValueError("scan grid is finer than the truth grid")
    for n, ext in zip(scan_grid.shape[:3], truth.extent):
        if (n - 1) * scan_grid.cell_size > ext + 1e-9:
            raise ValueError("scan grid extends beyond the truth domain")
    sensor = sensor or SensorModel(sigma_rel=0.0, p_fault=0.0)
    out = []
    for idx, cell in enumerate(serpentine_order(scan_grid.nx, scan_grid.ny, scan_grid.nz)):
        pos = tuple(float(c) * scan_grid.cell_size for c in cell)
        v = sample_truth(fld, pos, time)
        if sensor.sigma_rel > 0 or sensor.p_fault > 0:
            rng = np.random.default_rng([seed, idx])
            v = max(v * (1.0 + sensor.sigma_rel * rng.standard_normal()), 0.0)
            if sensor.p_fault > 0 and rng.random() < sensor.p_fault:
                v = float(rng.uniform(*sensor.corrupt_range))
        out.append(ScanSample(cell, pos, float(time), float(v)))
    return out


def fit_coarse(samples: Sequence[ScanSample], scan_grid: GridSpec, k: int = 6, power: float = 2.0) -> CoarseField:
    if not samples:
        raise ValueError("need at least one scan sample")
    vals = np.full((scan_grid.nx, scan_grid.ny, scan_grid.nz), np.nan)
    for s in samples:
        vals[s.cell] = s.value
    known = np.array([s.position for s in samples], dtype=float)
    kv = np.array([s.value for s in samples])
    ids = list(range(len(samples)))
    for cell in zip(*np.nonzero(np.isnan(vals))):
        pos = [float(c) * scan_grid.cell_size for c in cell]
        vals[cell] = baseline_idw(pos, known, kv, min(k, len(samples)), power, ids)
    return CoarseField(scan_grid, np.maximum(vals, 0.0), list(samples))


def gradient_magnitude(coarse: CoarseField) -> np.ndarray:
    """|g| from central differences, one-sided at the edges; single-cell axes are skipped."""
    v = coarse.values
    h = coarse.grid.cell_size
    sq = np.zeros_like(v)
    for axis, n in enumerate(v.shape):
        if n == 1:
            log.info("axis %d has a single cell; no derivative taken along it", axis)
            continue
        if n == 2:
            raise ValueError(f"axis {axis} has 2 cells; derivatives need at least 3")
        sq += np.gradient(v, h, axis=axis, edge_order=1) ** 2
    return np.sqrt(sq)


def _face_neighbors(cell, shape):
    for axis in range(3):
        for step in (-1, 1):
            nb = list(cell)
            nb[axis] += step
            if 0 <= nb[axis] < shape[axis]:
                yield tuple(nb)


def compute_pdt(coarse: CoarseField, params: PdtParams = PdtParams()) -> list[ImportancePoint]:
    """Gradient-threshold and local-extremum cells with their importance scores."""
    g = gradient_magnitude(coarse)
    theta = float(np.percentile(g, THETA_PERCENTILE)) if params.grad_threshold is None else params.grad_threshold
    v = coarse.values
    points = []
    for cell in np.ndindex(v.shape):
        score_g = params.w_grad * (g[cell] - theta) if g[cell] > theta else 0.0
        score_e = 0.0
        if params.include_extrema:
            nbs = [v[nb] for nb in _face_neighbors(cell, v.shape)]
            if nbs and (all(v[cell] > x for x in nbs) or all(v[cell] < x for x in nbs)):
                score_e = params.w_ext * abs(v[cell] - float(np.mean(nbs)))
        if score_g > 0 and score_e > 0:
            kind = "both"
        elif score_g > 0:
            kind = "gradient"
        elif score_e > 0:
            kind = "extremum"
        else:
            continue
        points.append(ImportancePoint(tuple(int(c) for c in cell), coarse.position(cell), kind,
                                      float(score_g + score_e)))
    points.sort(key=lambda p: (-p.importance, p.cell))
    return points


def leg_cost(energy: UavEnergyModel, here, there, hover_time_s: float) -> tuple[float, float, float]:
    d = math.dist(here, there)
    return d, energy.e_fly * d, energy.e_hover * hover_time_s


def plan_route(points: Sequence[ImportancePoint], start: Sequence[float], energy: UavEnergyModel,
               hover_time_s: float) -> FlightPlan:
    """Step-greedy on importance / (fly + hover energy) among legs that still fit the budget.

    The ledger is accumulated in exact rational arithmetic over the float leg
    costs, so the budget check has no rounding slack.  No return leg is reserved.
    """
    if hover_time_s <= 0:
        raise ValueError("hover_time_s must be > 0")
    here = tuple(float(c) for c in start)
    budget = Fraction(energy.budget)
    spent = Fraction(0)
    remaining = list(points)
    chosen, legs = [], []
    while remaining:
        best = None
        for p in remaining:
            d, fly, hover = leg_cost(energy, here, p.position, hover_time_s)
            if spent + Fraction(fly) + Fraction(hover) > budget:
                continue
            key = (-(p.importance / (fly + hover)), p.cell)
            if best is None or key < best[0]:
                best = (key, p, d, fly, hover)
        if best is None:
            break
        _, p, d, fly, hover = best
        spent += Fraction(fly) + Fraction(hover)
        chosen.append(p)
        legs.append({"distance_m": d, "fly_J": fly, "hover_J": hover})
        remaining.remove(p)
        here = p.position
    return FlightPlan(tuple(float(c) for c in start), chosen, float(hover_time_s), legs, float(energy.budget))


@dataclass
class FlightSample:
    cell: tuple[int, int, int]
    position: tuple[float, float, float]
    time: float
    truth: float
    mixed: float  # noiseless reading after residual-air mixing
    measured: float


@dataclass
class FlightResult:
    samples: list[FlightSample]
    energy_used: float
    end_time: float

    @property
    def mixing_errors(self) -> list[float]:
        return [abs(s.mixed - s.truth) for s in self.samples]


def mixing_alpha(hover_time_s: float, tau_s: float = TAU_S) -> float:
    return 1.0 - math.exp(-hover_time_s / tau_s)


def simulate_flight(plan: FlightPlan, fld: Field, tau_s: float = TAU_S, start_time: float = 0.0,
                    energy: UavEnergyModel | None = None, sensor: SensorModel | None = None,
                    seed: int = 0) -> FlightResult:
    """Fly the plan; each reading mixes local air with the previous waypoint's air.

    Truth is evaluated when hovering ends at each waypoint; the carried-over
    air is the truth the previous reading was taken against.
    """
    if tau_s <= 0:
        raise ValueError("tau_s must be > 0")
    budget = Fraction(energy.budget if energy is not None else plan.budget)
    if plan.exact_total() > budget:
        raise ValueError("plan energy exceeds the UAV budget")
    speed = energy.speed if energy is not None else UavEnergyModel().speed
    sensor = sensor or SensorModel(sigma_rel=0.0, p_fault=0.0)
    rng = np.random.default_rng(seed)
    alpha = mixing_alpha(plan.hover_time_s, tau_s)
    t = float(start_time)
    carry = sample_truth(fld, plan.start, t)
    out = []
    for p, leg in zip(plan.waypoints, plan.legs):
        t += leg["distance_m"] / speed + plan.hover_time_s
        truth = sample_truth(fld, p.position, t)
        mixed = alpha * truth + (1 - alpha) * carry
        measured = mixed
        if sensor.sigma_rel > 0:
            measured = max(mixed * (1.0 + sensor.sigma_rel * rng.standard_normal()), 0.0)
        out.append(FlightSample(p.cell, p.position, t, truth, mixed, measured))
        carry = truth
    return FlightResult(out, plan.total_energy, t)


def importance_csv(points: Sequence[ImportancePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "kind", "score"])
    for p in points:
        w.writerow([*map(repr, p.position), p.kind, repr(p.importance)])
    return buf.getvalue()
