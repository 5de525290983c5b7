"""Synthetic ground-truth pollution fields.

A field is produced by an explicit finite-difference advection-diffusion
update on a regular node grid.  Node ``(i, j, k)`` sits at
``(i, j, k) * cell_size`` metres and snapshot ``s`` at ``s * t_step``
seconds; ``n_steps`` updates give ``n_steps + 1`` snapshots.  Weather record
``s`` drives the update from snapshot ``s`` to ``s + 1``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FIELD_CSV_SCHEMA = "# schema: agsense.field/1"
WEATHER_CSV_SCHEMA = "# schema: agsense.weather/1"
AXES = ("x", "y", "z")


class FieldError(ValueError):
    """Invalid field configuration."""


class StabilityError(FieldError):
    """The explicit update would be unstable or produce negative mass."""


class OutOfBoundsError(ValueError):
    def __init__(self, axis: str, value: float, lo: float, hi: float):
        super().__init__(f"{axis}={value!r} outside [{lo}, {hi}]")
        self.axis = axis
        self.value = value


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    cell_size: float
    t_step: float
    n_steps: int

    def __post_init__(self):
        for name in ("nx", "ny", "nz", "n_steps"):
            if int(getattr(self, name)) < 1:
                raise FieldError(f"{name} must be >= 1")
        if not self.cell_size > 0:
            raise FieldError("cell_size must be > 0")
        if not self.t_step > 0:
            raise FieldError("t_step must be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def extent(self) -> tuple[float, float, float]:
        """Largest coordinate along each axis (metres)."""
        return tuple((n - 1) * self.cell_size for n in self.shape)

    @property
    def duration(self) -> float:
        return self.n_steps * self.t_step

    def node_position(self, index: Sequence[int]) -> np.ndarray:
        return np.asarray(index, dtype=float) * self.cell_size

    def contains(self, position: Sequence[float], tol: float = 1e-9) -> bool:
        return all(-tol <= p <= e + tol for p, e in zip(position, self.extent))


@dataclass(frozen=True)
class SourceSpec:
    position: tuple[float, float, float]
    emission_rate: float
    active_window: tuple[float, float] = (0.0, math.inf)

    def __post_init__(self):
        if self.emission_rate < 0:
            raise FieldError("emission_rate must be >= 0")
        if self.active_window[0] > self.active_window[1]:
            raise FieldError("active_window start after end")

    def active(self, t: float) -> bool:
        return self.active_window[0] <= t <= self.active_window[1]


@dataclass(frozen=True)
class DiffusionParams:
    diffusivity: float
    decay_rate: float = 0.0
    background: float = 0.0

    def __post_init__(self):
        if self.diffusivity < 0:
            raise FieldError("diffusivity must be >= 0")
        if self.decay_rate < 0 or self.background < 0:
            raise FieldError("decay_rate and background must be >= 0")


@dataclass(frozen=True)
class WeatherParams:
    """First-order autoregressive weather generator settings."""

    mean_wind: tuple[float, float, float] = (0.0, 0.0, 0.0)
    wind_sigma: float = 0.0
    ar_coeff: float = 0.9
    humidity_mean: float = 50.0
    humidity_sigma: float = 0.0
    temperature_mean: float = 15.0
    temperature_sigma: float = 0.0
    max_wind: float | None = None  # speed cap, m/s

    def __post_init__(self):
        if self.max_wind is not None and self.max_wind < 0:
            raise FieldError("max_wind must be >= 0")
        if not 0 <= self.ar_coeff < 1:
            raise FieldError("ar_coeff must be in [0, 1)")
        if min(self.wind_sigma, self.humidity_sigma, self.temperature_sigma) < 0:
            raise FieldError("weather sigmas must be >= 0")


@dataclass(frozen=True)
class WeatherRecord:
    time: float
    wind: tuple[float, float, float]
    humidity: float
    temperature: float
    forecast: bool = False

    def __post_init__(self):
        if not 0 <= self.humidity <= 100:
            raise FieldError(f"humidity {self.humidity} outside [0, 100]")
        values = (self.time, *self.wind, self.humidity, self.temperature)
        if not all(math.isfinite(v) for v in values):
            raise FieldError("weather record has non-finite component")


@dataclass(frozen=True, eq=False)
class Field:
    grid: GridSpec
    concentration: np.ndarray  # (nx, ny, nz, n_steps + 1)
    weather: tuple[WeatherRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        c = self.concentration
        if c.shape != (*self.grid.shape, self.grid.n_steps + 1):
            raise FieldError(f"concentration shape {c.shape} does not match grid")
        if len(self.weather) != self.grid.n_steps:
            raise FieldError("weather trace length must equal n_steps")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise FieldError("concentrations must be finite and >= 0")
        c.flags.writeable = False

    def snapshot(self, step: int) -> np.ndarray:
        return self.concentration[..., step]


def generate_weather(grid: GridSpec, params: WeatherParams, seed: int) -> tuple[WeatherRecord, ...]:
    """AR(1) process per component, one record per time step."""
    rng = np.random.default_rng(seed)
    n = grid.n_steps
    phi = params.ar_coeff
    innov = math.sqrt(1.0 - phi * phi)
    mean = np.array([*params.mean_wind, params.humidity_mean, params.temperature_mean], dtype=float)
    sigma = np.array([params.wind_sigma] * 3 + [params.humidity_sigma, params.temperature_sigma])
    z = rng.standard_normal((n, 5))
    state = z[0].copy()
    out = []
    for s in range(n):
        if s:
            state = phi * state + innov * z[s]
        v = mean + sigma * state
        speed = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
        if params.max_wind is not None and speed > params.max_wind:
            v[:3] *= params.max_wind / speed
        out.append(
            WeatherRecord(
                time=s * grid.t_step,
                wind=(float(v[0]), float(v[1]), float(v[2])),
                humidity=float(min(max(v[3], 0.0), 100.0)),
                temperature=float(v[4]),
            )
        )
    return tuple(out)


def check_stability(grid: GridSpec, dynamics: DiffusionParams, weather: Iterable[WeatherRecord]) -> None:
    """Reject time steps the explicit scheme cannot take.

    Besides the diffusion number and the Courant number, the summed update
    coefficient must stay at most 1 so every new value is a non-negative
    combination of old ones.
    """
    h, dt = grid.cell_size, grid.t_step
    r = dynamics.diffusivity * dt / h**2
    if r > 1 / 6:
        raise StabilityError(
            f"diffusion number D*dt/h^2 = {r:.4g} exceeds 1/6; reduce t_step or diffusivity"
        )
    decay = dynamics.decay_rate * dt
    worst = 0.0
    for rec in weather:
        speed = math.hypot(*rec.wind)
        if speed * dt / h > 1:
            raise StabilityError(
                f"Courant number |wind|*dt/h = {speed * dt / h:.4g} exceeds 1 at t={rec.time}"
            )
        worst = max(worst, sum(abs(w) for w in rec.wind) * dt / h)
    total = 6 * r + worst + decay
    if total > 1 + 1e-12:
        raise StabilityError(
            f"combined update coefficient 6r + sum|c| + decay*dt = {total:.4g} exceeds 1"
        )


def _source_stencil(grid: GridSpec, position: Sequence[float]) -> list[tuple[tuple[int, int, int], float]]:
    """Trilinear split of a point source over its surrounding nodes."""
    if not grid.contains(position):
        raise FieldError(f"source at {tuple(position)} outside grid bounds {grid.extent}")
    parts = []
    for p, n in zip(position, grid.shape):
        u = min(max(p / grid.cell_size, 0.0), n - 1)
        i0 = min(int(math.floor(u)), max(n - 2, 0))
        f = u - i0 if n > 1 else 0.0
        parts.append([(i0, 1.0 - f), (i0 + 1, f)] if n > 1 else [(0, 1.0)])
    stencil = []
    for ix, wx in parts[0]:
        for iy, wy in parts[1]:
            for iz, wz in parts[2]:
                w = wx * wy * wz
                if w > 0:
                    stencil.append(((ix, iy, iz), w))
    return stencil


def advance(c: np.ndarray, grid: GridSpec, dynamics: DiffusionParams, wind: Sequence[float],
            injection: np.ndarray) -> np.ndarray:
    """One explicit update with zero-gradient boundaries."""
    h, dt = grid.cell_size, grid.t_step
    r = dynamics.diffusivity * dt / h**2
    p = np.pad(c, 1, mode="edge")
    core = (slice(1, -1),) * 3
    diff = np.zeros_like(c)
    adv = np.zeros_like(c)
    for axis in range(3):
        lo = list(core)
        hi = list(core)
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        minus, plus = p[tuple(lo)], p[tuple(hi)]
        diff = diff + (plus + minus - 2.0 * c)
        courant = wind[axis] * dt / h
        if courant > 0:
            adv = adv - courant * (c - minus)
        elif courant < 0:
            adv = adv - courant * (plus - c)
    new = c + r * diff + adv - dynamics.decay_rate * dt * (c - dynamics.background) + injection
    return np.maximum(new, 0.0)


def build_field(grid: GridSpec, sources: Sequence[SourceSpec], weather_seed: int,
                dynamics: DiffusionParams, weather_params: WeatherParams | None = None,
                weather: Sequence[WeatherRecord] | None = None) -> Field:
    """Run the advection-diffusion model and return the full space-time field.

    ``weather`` overrides the generated trace when given (it must have one
    record per step).
    """
    if weather is None:
        weather = generate_weather(grid, weather_params or WeatherParams(), weather_seed)
    weather = tuple(weather)
    if len(weather) != grid.n_steps:
        raise FieldError("weather trace length must equal n_steps")
    check_stability(grid, dynamics, weather)
    stencils = [(_source_stencil(grid, s.position), s) for s in sources]
    volume = grid.cell_size**3

    out = np.empty((*grid.shape, grid.n_steps + 1))
    c = np.full(grid.shape, float(dynamics.background))
    out[..., 0] = c
    for s in range(grid.n_steps):
        t = s * grid.t_step
        injection = np.zeros(grid.shape)
        for stencil, src in stencils:
            if src.active(t):
                mass = src.emission_rate * grid.t_step / volume
                for idx, w in stencil:
                    injection[idx] += w * mass
        c = advance(c, grid, dynamics, weather[s].wind, injection)
        out[..., s + 1] = c
    return Field(grid=grid, concentration=out, weather=weather)


def _axis_weights(value: float, spacing: float, n: int, axis: str) -> tuple[int, float]:
    hi = (n - 1) * spacing
    tol = 1e-9 * max(spacing, 1.0)
    if not (-tol <= value <= hi + tol):
        raise OutOfBoundsError(axis, value, 0.0, hi)
    if n == 1:
        return 0, 0.0
    u = min(max(value / spacing, 0.0), n - 1)
    i0 = min(int(math.floor(u)), n - 2)
    return i0, u - i0


def sample_truth(fld: Field, position: Sequence[float], time: float) -> float:
    """Quadrilinear interpolation of the stored field."""
    g = fld.grid
    idx = []
    for axis, (p, n) in enumerate(zip(position, g.shape)):
        idx.append(_axis_weights(float(p), g.cell_size, n, AXES[axis]))
    idx.append(_axis_weights(float(time), g.t_step, g.n_steps + 1, "t"))
    total = 0.0
    c = fld.concentration
    for corner in range(16):
        w = 1.0
        node = []
        for axis, (i0, f) in enumerate(idx):
            bit = (corner >> axis) & 1
            w *= f if bit else 1.0 - f
            node.append(i0 + bit)
        if w:
            total += w * c[tuple(node)]
    return float(total)


def sample_truth_many(fld: Field, positions: np.ndarray, time: float) -> np.ndarray:
    return np.array([sample_truth(fld, p, time) for p in np.atleast_2d(positions)])


def weather_at(fld_or_trace, time: float) -> WeatherRecord:
    """Piecewise-constant hold of the record at or before ``time``."""
    trace = fld_or_trace.weather if isinstance(fld_or_trace, Field) else tuple(fld_or_trace)
    if not trace or time < trace[0].time:
        raise ValueError(f"time {time} precedes the weather trace")
    times = [r.time for r in trace]
    i = int(np.searchsorted(times, time, side="right")) - 1
    return trace[i]


def write_field_csv(fld: Field, steps: Iterable[int] | None = None) -> str:
    g = fld.grid
    steps = range(g.n_steps + 1) if steps is None else steps
    buf = io.StringIO()
    buf.write(FIELD_CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "t", "value"])
    for s in steps:
        snap = fld.snapshot(s)
        for i in range(g.nx):
            for j in range(g.ny):
                for k in range(g.nz):
                    w.writerow([repr(i * g.cell_size), repr(j * g.cell_size), repr(k * g.cell_size),
                                repr(s * g.t_step), repr(float(snap[i, j, k]))])
    return buf.getvalue()


def write_weather_csv(trace: Iterable[WeatherRecord]) -> str:
    buf = io.StringIO()
    buf.write(WEATHER_CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "wx", "wy", "wz", "humidity", "temp", "flag"])
    for r in trace:
        w.writerow([repr(r.time), *map(repr, r.wind), repr(r.humidity), repr(r.temperature),
                    "forecast" if r.forecast else "actual"])
    return buf.getvalue()


def read_weather_csv(text: str) -> tuple[WeatherRecord, ...]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        out.append(WeatherRecord(
            time=float(row["t"]),
            wind=(float(row["wx"]), float(row["wy"]), float(row["wz"])),
            humidity=float(row["humidity"]),
            temperature=float(row["temp"]),
            forecast=row["flag"] == "forecast",
        ))
    return tuple(out)
