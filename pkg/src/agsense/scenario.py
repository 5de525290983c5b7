"""Scenario configuration: strict YAML schema and its conversion to module objects."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field as PField, ValidationError, field_validator, model_validator

from . import aerial_plan as ap
from . import field_model as fm
from .fitting import ScreeningParams
from .mlp import MlpSpec
from .netsim import Command, DeviceState, LinkModel, ScheduledCommand, SensorModel, SimulationSetup
from .power import IntervalPolicy, PowerProfile
from .prediction import MAX_HORIZON_S, WeatherFeatureSpec
from .preprocess import OutlierParams

Vec3 = tuple[float, float, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridCfg(_Strict):
    nx: int = PField(ge=1)
    ny: int = PField(ge=1)
    nz: int = PField(ge=1)
    cell_size: float = PField(gt=0)
    t_step: float = PField(gt=0)
    n_steps: int = PField(ge=1)


class DynamicsCfg(_Strict):
    diffusivity: float = PField(ge=0)
    decay_rate: float = PField(default=0.0, ge=0)
    background: float = PField(default=0.0, ge=0)


class WeatherCfg(_Strict):
    mean_wind: Vec3 = (0.0, 0.0, 0.0)
    wind_sigma: float = PField(default=0.0, ge=0)
    ar_coeff: float = PField(default=0.9, ge=0, lt=1)
    humidity_mean: float = PField(default=50.0, ge=0, le=100)
    humidity_sigma: float = PField(default=0.0, ge=0)
    temperature_mean: float = 15.0
    temperature_sigma: float = PField(default=0.0, ge=0)
    max_wind: Optional[float] = PField(default=None, gt=0)
    file: Optional[str] = None  # CSV trace replaces the generator


class SourceCfg(_Strict):
    position: Vec3
    emission_rate: float = PField(ge=0)
    active_window: tuple[float, float] = (0.0, math.inf)


class FieldCfg(_Strict):
    grid: GridCfg
    dynamics: DynamicsCfg
    weather: WeatherCfg = WeatherCfg()
    sources: list[SourceCfg] = []


class SensorCfg(_Strict):
    sigma_rel: float = PField(default=0.0, ge=0)
    p_fault: float = PField(default=0.0, ge=0, le=1)


class PowerCfg(_Strict):
    e_wake: float = PField(default=PowerProfile.e_wake, ge=0)
    e_sense: float = PField(default=PowerProfile.e_sense, ge=0)
    e_upload: float = PField(default=PowerProfile.e_upload, ge=0)
    e_sleep_per_min: float = PField(default=PowerProfile.e_sleep_per_min, ge=0)
    capacity_mAh: float = PField(default=PowerProfile.capacity_mAh, gt=0)


class DeviceCfg(_Strict):
    id: str = PField(min_length=1)
    position: Vec3
    kind: Literal["ground", "aerial"] = "ground"
    sensing_interval_min: int = PField(default=30, ge=1)
    uploading_interval_min: int = PField(default=60, ge=1)
    calibration: tuple[float, float] = (1.0, 0.0)
    waypoints: list[Vec3] = []

    @field_validator("calibration")
    @classmethod
    def _gain_positive(cls, v):
        if v[0] <= 0:
            raise ValueError("calibration gain must be > 0")
        return v


class LinkCfg(_Strict):
    latency_s: float = PField(default=2.0, ge=0)
    jitter_s: float = PField(default=0.0, ge=0)
    loss_probability: float = PField(default=0.0, ge=0, le=1)


class CommandCfg(_Strict):
    device_id: str
    sensing_interval_min: int = PField(ge=1)
    uploading_interval_min: int = PField(ge=1)
    issue_time: float = PField(ge=0)
    via: Literal["short_message", "response"] = "short_message"


class PolicyCfg(_Strict):
    base_sense_min: int = PField(default=30, ge=1)
    base_upload_min: int = PField(default=60, ge=1)
    aqi_thresholds: list[float] = [75.0, 150.0]
    scale_factors: list[float] = [0.5, 0.5]
    floor_min: int = PField(default=1, ge=1)


class PreprocessCfg(_Strict):
    k_neighbors: int = PField(default=OutlierParams.k_neighbors, ge=1)
    rel_threshold: float = PField(default=OutlierParams.rel_threshold, gt=0)
    min_peers: int = PField(default=OutlierParams.min_peers, ge=1)
    bucket_s: float = PField(default=OutlierParams.bucket_s, gt=0)


class SimulationCfg(_Strict):
    duration_min: int = PField(default=1440, ge=0)
    policy: Optional[PolicyCfg] = None


class FittingCfg(_Strict):
    k_spatial: int = PField(default=4, ge=1)
    k_temporal: int = PField(default=2, ge=1)
    history_len: int = PField(default=2, ge=1)
    pattern_window: int = PField(default=6, ge=2)
    step_s: float = PField(default=600.0, gt=0)
    holdout_fraction: float = PField(default=0.2, gt=0, lt=1)
    seeds: int = PField(default=10, ge=1)
    layer_widths: list[int] = [32, 32]
    epochs: int = PField(default=50, ge=0)
    learning_rate: float = PField(default=1e-3, gt=0)
    weight_decay: float = PField(default=1e-2, ge=0)
    replicas: int = PField(default=4, ge=1)
    drop_prob: float = PField(default=0.3, ge=0, lt=1)


class PredictionCfg(_Strict):
    horizons_s: list[float] = [600.0, 1800.0, 3600.0, 7200.0]
    max_horizon_s: float = PField(default=MAX_HORIZON_S, gt=0)
    seeds: int = PField(default=5, ge=1)
    lag_steps: int = PField(default=1, ge=1)

    @model_validator(mode="after")
    def _horizons(self):
        h = self.horizons_s
        if not h or h != sorted(h) or h[0] <= 0 or h[-1] > self.max_horizon_s:
            raise ValueError("horizons_s must be ascending, > 0 and within max_horizon_s")
        return self


class DeploymentCfg(_Strict):
    n: int = PField(ge=1)
    candidates: Optional[list[str]] = None  # device ids surveyed; default every ground device
    survey_file: Optional[str] = None
    sigma_d: Optional[float] = PField(default=None, gt=0)
    sigma_p: float = PField(default=0.5, gt=0)
    initial: Optional[list[str]] = None
    survey_step_s: float = PField(default=1800.0, gt=0)


class UavEnergyCfg(_Strict):
    e_fly: float = PField(default=ap.UavEnergyModel.e_fly, gt=0)
    e_hover: float = PField(default=ap.UavEnergyModel.e_hover, gt=0)
    budget: float = PField(default=ap.UavEnergyModel.budget, gt=0)
    speed: float = PField(default=ap.UavEnergyModel.speed, gt=0)


class ScanGridCfg(_Strict):
    nx: int = PField(ge=1)
    ny: int = PField(ge=1)
    nz: int = PField(ge=1)
    cell_size: float = PField(gt=0)


class UavCfg(_Strict):
    start: Vec3 = (0.0, 0.0, 0.0)
    energy: UavEnergyCfg = UavEnergyCfg()
    scan_grid: ScanGridCfg
    hover_s: float = PField(default=5.0, gt=0)
    tau_s: float = PField(default=ap.TAU_S, gt=0)
    scan_time_s: float = PField(default=0.0, ge=0)
    grad_threshold: Optional[float] = PField(default=None, ge=0)
    w_grad: float = PField(default=1.0, ge=0)
    w_ext: float = PField(default=1.0, ge=0)
    sensor: SensorCfg = SensorCfg()


class SweepCfg(_Strict):
    intervals_min: list[int] = [15, 30, 60, 120]
    aerial_intervals_h: list[float] = [3.0, 6.0, 12.0, 24.0]
    hover_s: list[float] = [1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 15.0]
    seeds: int = PField(default=5, ge=1)
    probe_stride: int = PField(default=2, ge=1)
    probe_times_s: Optional[list[float]] = None

    @field_validator("intervals_min", "aerial_intervals_h", "hover_s")
    @classmethod
    def _positive_sorted(cls, v):
        if not v or any(x <= 0 for x in v) or list(v) != sorted(v):
            raise ValueError("sweep grid must be non-empty, positive and ascending")
        return v


class ScenarioCfg(_Strict):
    name: str
    seed: int
    output_dir: str = "out"
    field: FieldCfg
    sensor: SensorCfg = SensorCfg()
    power: PowerCfg = PowerCfg()
    devices: list[DeviceCfg] = []
    link: LinkCfg = LinkCfg()
    commands: list[CommandCfg] = []
    simulation: SimulationCfg = SimulationCfg()
    preprocess: PreprocessCfg = PreprocessCfg()
    fitting: Optional[FittingCfg] = None
    prediction: Optional[PredictionCfg] = None
    deployment: Optional[DeploymentCfg] = None
    uav: Optional[UavCfg] = None
    sweeps: Optional[SweepCfg] = None

    @model_validator(mode="after")
    def _semantics(self):
        seen: dict[str, int] = {}
        for i, d in enumerate(self.devices):
            if d.id in seen:
                raise ValueError(f"duplicate device id {d.id!r} at devices[{seen[d.id]}] and devices[{i}]")
            seen[d.id] = i
        for i, c in enumerate(self.commands):
            if c.device_id not in seen:
                raise ValueError(f"commands[{i}].device_id {c.device_id!r} does not name a device")
        if self.deployment is not None:
            for name in ("candidates", "initial"):
                for ref in getattr(self.deployment, name) or []:
                    if ref not in seen:
                        raise ValueError(f"deployment.{name} references unknown device {ref!r}")
        g = self.field.grid
        ext = ((g.nx - 1) * g.cell_size, (g.ny - 1) * g.cell_size, (g.nz - 1) * g.cell_size)
        for i, d in enumerate(self.devices):
            for p in [d.position, *d.waypoints]:
                if not all(-1e-9 <= c <= e + 1e-9 for c, e in zip(p, ext)):
                    raise ValueError(f"devices[{i}] position {p} lies outside the field grid")
        return self


class ConfigError(ValueError):
    """Validation failure with one ``path: message`` line per problem."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


def _loc(loc: tuple) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out


def parse_config(text: str | bytes) -> "Scenario":
    raw = text if isinstance(text, bytes) else text.encode()
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<yaml>: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ConfigError(["<root>: config must be a mapping"])
    try:
        cfg = ScenarioCfg.model_validate(data)
    except ValidationError as exc:
        problems = []
        for e in exc.errors():
            path = _loc(tuple(p for p in e["loc"] if p not in ("function-after[_semantics(), ScenarioCfg]",)))
            problems.append(f"{path or '<root>'}: {e['msg']}")
        raise ConfigError(problems) from exc
    scen = Scenario(cfg, hashlib.sha256(raw).hexdigest())
    scen.check_modules()
    return scen


def load_config(path: str | Path) -> "Scenario":
    p = Path(path)
    scen = parse_config(p.read_bytes())
    scen.base_dir = p.parent
    return scen


def canonical_yaml(cfg: ScenarioCfg) -> str:
    data = cfg.model_dump(mode="json")
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=None)


@dataclass
class Scenario:
    cfg: ScenarioCfg
    config_hash: str
    base_dir: Path = Path(".")

    @property
    def name(self) -> str:
        return self.cfg.name

    @property
    def seed(self) -> int:
        return self.cfg.seed

    # ------------------------------------------------------------- field
    @cached_property
    def grid(self) -> fm.GridSpec:
        return fm.GridSpec(**self.cfg.field.grid.model_dump())

    @property
    def dynamics(self) -> fm.DiffusionParams:
        return fm.DiffusionParams(**self.cfg.field.dynamics.model_dump())

    @property
    def sources(self) -> list[fm.SourceSpec]:
        return [fm.SourceSpec(tuple(s.position), s.emission_rate, tuple(s.active_window))
                for s in self.cfg.field.sources]

    def weather_params(self) -> fm.WeatherParams:
        w = self.cfg.field.weather.model_dump(exclude={"file"})
        w["mean_wind"] = tuple(w["mean_wind"])
        return fm.WeatherParams(**w)

    def weather_trace(self) -> tuple[fm.WeatherRecord, ...] | None:
        f = self.cfg.field.weather.file
        if f is None:
            return None
        return fm.read_weather_csv((self.base_dir / f).read_text())

    def field_for(self, seed: int) -> fm.Field:
        cache = self.__dict__.setdefault("_fields", {})
        if seed not in cache:
            cache[seed] = fm.build_field(self.grid, self.sources, seed, self.dynamics,
                                         self.weather_params(), weather=self.weather_trace())
        return cache[seed]

    @property
    def field(self) -> fm.Field:
        return self.field_for(self.seed)

    def check_modules(self) -> None:
        """Run module-level validation that the schema cannot express."""
        try:
            g = self.grid
            trace = self.weather_trace() or fm.generate_weather(g, self.weather_params(), self.seed)
            fm.check_stability(g, self.dynamics, trace)
            for s in self.sources:
                if not g.contains(s.position):
                    raise fm.FieldError(f"source at {s.position} lies outside the grid")
            if self.cfg.simulation.policy is not None:
                self.policy()
        except (fm.FieldError, ValueError) as exc:
            raise ConfigError([f"field: {exc}"]) from exc
        if self.cfg.uav is not None:
            sg = self.cfg.uav.scan_grid
            if sg.cell_size < g.cell_size:
                raise ConfigError(["uav.scan_grid.cell_size: scan grid is finer than the truth grid"])
            for n, ext in zip((sg.nx, sg.ny, sg.nz), g.extent):
                if (n - 1) * sg.cell_size > ext + 1e-9:
                    raise ConfigError(["uav.scan_grid: scan grid extends beyond the field"])

    # ------------------------------------------------------------- devices
    @property
    def profile(self) -> PowerProfile:
        return PowerProfile(**self.cfg.power.model_dump())

    @property
    def sensor(self) -> SensorModel:
        return SensorModel(**self.cfg.sensor.model_dump())

    @property
    def link(self) -> LinkModel:
        return LinkModel(**self.cfg.link.model_dump(), seed=self.seed)

    def policy(self) -> IntervalPolicy | None:
        p = self.cfg.simulation.policy
        if p is None:
            return None
        return IntervalPolicy(p.base_sense_min, p.base_upload_min, tuple(p.aqi_thresholds),
                              tuple(p.scale_factors), p.floor_min)

    def ground_ids(self) -> list[str]:
        return [d.id for d in self.cfg.devices if d.kind == "ground"]

    def devices(self, seed: int | None = None, intervals: tuple[int, int] | None = None,
                kinds: tuple[str, ...] = ("ground", "aerial")) -> list[DeviceState]:
        seed = self.seed if seed is None else seed
        out = []
        for i, d in enumerate(self.cfg.devices):
            if d.kind not in kinds:
                continue
            iv = intervals or (d.sensing_interval_min, d.uploading_interval_min)
            out.append(DeviceState(
                device_id=d.id, position=tuple(d.position), kind=d.kind,
                sensing_interval_min=iv[0], uploading_interval_min=iv[1],
                profile=self.profile, sensor=self.sensor, calibration=tuple(d.calibration),
                noise_seed=seed * 1_000_003 + i, waypoints=[tuple(w) for w in d.waypoints]))
        return out

    def commands(self) -> list[ScheduledCommand]:
        return [ScheduledCommand(Command(c.device_id, c.sensing_interval_min, c.uploading_interval_min,
                                         c.issue_time), c.via) for c in self.cfg.commands]

    def simulation_setup(self, seed: int | None = None, intervals: tuple[int, int] | None = None,
                         duration_min: int | None = None, kinds=("ground", "aerial"),
                         with_commands: bool = True) -> SimulationSetup:
        seed = self.seed if seed is None else seed
        link = LinkModel(**self.cfg.link.model_dump(), seed=seed)
        return SimulationSetup(self.field_for(seed), self.devices(seed, intervals, kinds),
                               self.cfg.simulation.duration_min if duration_min is None else duration_min,
                               link, self.commands() if with_commands else [], self.policy())

    def outlier_params(self) -> OutlierParams:
        return OutlierParams(**self.cfg.preprocess.model_dump())

    # ------------------------------------------------------------- models
    def screening(self) -> ScreeningParams:
        f = self.cfg.fitting or FittingCfg()
        return ScreeningParams(f.k_spatial, f.k_temporal, f.history_len, f.pattern_window)

    def mlp_spec(self, seed: int = 0) -> MlpSpec:
        f = self.cfg.fitting or FittingCfg()
        return MlpSpec(layer_widths=tuple(f.layer_widths), learning_rate=f.learning_rate, epochs=f.epochs,
                       init_seed=seed, weight_decay=f.weight_decay)

    def weather_spec(self) -> WeatherFeatureSpec:
        p = self.cfg.prediction or PredictionCfg()
        return WeatherFeatureSpec(lag_steps=p.lag_steps)

    def uav_energy(self) -> ap.UavEnergyModel:
        u = self.cfg.uav
        return ap.UavEnergyModel(**(u.energy.model_dump() if u else {}))

    def scan_grid(self) -> fm.GridSpec:
        sg = self.cfg.uav.scan_grid
        return fm.GridSpec(sg.nx, sg.ny, sg.nz, sg.cell_size, self.grid.t_step, 1)

    def pdt_params(self) -> ap.PdtParams:
        u = self.cfg.uav
        return ap.PdtParams(u.grad_threshold, True, u.w_grad, u.w_ext)

    def probe_points(self, stride: int | None = None) -> np.ndarray:
        s = stride or (self.cfg.sweeps.probe_stride if self.cfg.sweeps else 2)
        g = self.grid
        idx = np.array(np.meshgrid(np.arange(0, g.nx, s), np.arange(0, g.ny, s), np.arange(g.nz),
                                   indexing="ij")).reshape(3, -1).T
        return idx * g.cell_size

    def echo(self) -> dict:
        # JSON-safe: unbounded windows serialise as null
        return json.loads(self.cfg.model_dump_json())
