"""Message-level simulation of ground and UAV-borne sensing devices.

Every device wakes once per simulated minute.  Within a tick the event loop
posts due server commands, steps devices in ascending id order, and then
delivers in-flight uplink messages in ``(arrival_time, sequence)`` order.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .field_model import Field, sample_truth
from .power import IntervalPolicy, PowerProfile, adapt_intervals, to_mah, to_units

log = logging.getLogger(__name__)

TICK_SECONDS = 60.0
SAMPLE_CSV_SCHEMA = "# schema: agsense.samples/1"
SAMPLE_COLUMNS = ["device_id", "x", "y", "z", "t", "pm25", "pm10", "flag", "arrival_t"]
FLAGS = ("ok", "outlier", "calibrated")
LEDGER_CATEGORIES = ("wake", "sense", "upload", "sleep")


class UnknownDeviceError(KeyError):
    pass


@dataclass
class Sample:
    device_id: str
    position: tuple[float, float, float]
    time: float
    pm25: float
    pm10: float
    flag: str = "ok"

    def __post_init__(self):
        if not (math.isfinite(self.pm25) and math.isfinite(self.pm10)) or self.pm25 < 0 or self.pm10 < 0:
            raise ValueError("pm values must be finite and >= 0")
        if self.time < 0:
            raise ValueError("sample time must be >= 0")
        if self.flag not in FLAGS:
            raise ValueError(f"unknown flag {self.flag!r}")


@dataclass(frozen=True)
class Command:
    device_id: str
    sensing_interval_min: int
    uploading_interval_min: int
    issue_time: float = 0.0

    @property
    def valid(self) -> bool:
        return self.sensing_interval_min >= 1 and self.uploading_interval_min >= 1


@dataclass(frozen=True)
class SensorModel:
    sigma_rel: float = 0.0
    p_fault: float = 0.0
    corrupt_range: tuple[float, float] = (400.0, 600.0)
    pm10_ratio: float = 1.6


@dataclass(frozen=True)
class LinkModel:
    latency_s: float = 2.0
    jitter_s: float = 0.0
    loss_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.latency_s < 0 or self.jitter_s < 0:
            raise ValueError("latency must be >= 0")
        if not 0 <= self.loss_probability <= 1:
            raise ValueError("loss_probability must be in [0, 1]")


@dataclass
class DeviceState:
    device_id: str
    position: tuple[float, float, float]
    kind: str = "ground"
    sensing_interval_min: int = 30
    uploading_interval_min: int = 60
    profile: PowerProfile = field(default_factory=PowerProfile)
    sensor: SensorModel = field(default_factory=SensorModel)
    calibration: tuple[float, float] = (1.0, 0.0)
    noise_seed: int = 0
    battery_mAh: float | None = None
    waypoints: tuple[tuple[float, float, float], ...] = ()
    buffer: list[Sample] = field(default_factory=list)
    pending_command: Command | None = None
    dead: bool = False

    def __post_init__(self):
        if self.kind not in ("ground", "aerial"):
            raise ValueError(f"unknown device kind {self.kind!r}")
        if self.sensing_interval_min < 1 or self.uploading_interval_min < 1:
            raise ValueError("intervals must be >= 1 minute")
        if self.battery_mAh is None:
            self.battery_mAh = self.profile.capacity_mAh
        if self.battery_mAh < 0:
            raise ValueError("battery must be >= 0")
        self.position = tuple(float(p) for p in self.position)
        self.initial_charge = to_units(self.battery_mAh)
        self.charge = self.initial_charge
        self.ledger = {c: 0 for c in LEDGER_CATEGORIES}
        self.n_sensed = 0
        self.n_uploads = 0

    @property
    def remaining_mAh(self) -> float:
        return to_mah(self.charge)

    def try_charge(self, category: str, mah: float) -> bool:
        cost = to_units(mah)
        if cost > self.charge:
            return False
        self.charge -= cost
        self.ledger[category] += cost
        return True

    def apply_command(self, cmd: Command) -> bool:
        if not cmd.valid:
            log.warning("rejected malformed command for %s: %s", self.device_id, cmd)
            return False
        self.sensing_interval_min = cmd.sensing_interval_min
        self.uploading_interval_min = cmd.uploading_interval_min
        return True


@dataclass
class Action:
    kind: str  # wake | command_applied | command_rejected | sense | upload | dead
    device_id: str
    tick: int
    time: float
    sample: Sample | None = None
    command: Command | None = None


def _stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def _id_key(device_id: str) -> int:
    return zlib.crc32(device_id.encode())


def sense(state: DeviceState, fld: Field, time: float) -> Sample:
    """Read the sensor at the device position.

    Noise and fault draws come from a stream keyed on the device seed and its
    sense count, so readings do not depend on other devices' activity.
    """
    if not state.try_charge("sense", state.profile.e_sense):
        raise RuntimeError(f"device {state.device_id} cannot afford a detection")
    if state.kind == "aerial" and state.waypoints:
        state.position = tuple(state.waypoints[state.n_sensed % len(state.waypoints)])
    truth = sample_truth(fld, state.position, time)
    rng = _stream(state.noise_seed, state.n_sensed)
    m = state.sensor
    eps = rng.standard_normal(2)
    pm25 = max(truth * (1.0 + m.sigma_rel * eps[0]), 0.0)
    pm10 = max(truth * m.pm10_ratio * (1.0 + m.sigma_rel * eps[1]), 0.0)
    if m.p_fault > 0 and rng.random() < m.p_fault:
        lo, hi = m.corrupt_range
        pm25 = float(rng.uniform(lo, hi))
    gain, offset = state.calibration
    # the sensor reports the raw reading that calibration maps back to the measurement
    raw25 = max((pm25 - offset) / gain, 0.0)
    raw10 = max((pm10 - offset) / gain, 0.0)
    state.n_sensed += 1
    return Sample(state.device_id, state.position, float(time), float(raw25), float(raw10), "ok")


def step_device(state: DeviceState, minute_tick: int, fld: Field) -> list[Action]:
    """Wake, apply any pending command, sense and/or request an upload, sleep."""
    t = minute_tick * TICK_SECONDS
    if state.dead:
        return []
    dead = [Action("dead", state.device_id, minute_tick, t)]
    if state.charge <= 0 or not state.try_charge("wake", state.profile.e_wake):
        state.dead = True
        return dead
    actions = [Action("wake", state.device_id, minute_tick, t)]
    if state.pending_command is not None:
        cmd, state.pending_command = state.pending_command, None
        kind = "command_applied" if state.apply_command(cmd) else "command_rejected"
        actions.append(Action(kind, state.device_id, minute_tick, t, command=cmd))
    if minute_tick % state.sensing_interval_min == 0:
        if state.charge < to_units(state.profile.e_sense):
            state.dead = True
            return actions + dead
        s = sense(state, fld, t)
        state.buffer.append(s)
        actions.append(Action("sense", state.device_id, minute_tick, t, sample=s))
    if minute_tick % state.uploading_interval_min == 0 and state.buffer:
        actions.append(Action("upload", state.device_id, minute_tick, t))
    if not state.try_charge("sleep", state.profile.e_sleep_per_min):
        state.dead = True
        return actions + dead
    return actions


@dataclass
class ReceivedSample:
    sample: Sample
    arrival_time: float


@dataclass
class ServerResponse:
    delivered: bool
    arrival_time: float | None = None
    command: Command | None = None
    applied: bool = False
    battery_depleted: bool = False


@dataclass
class ServerState:
    device_ids: set[str] = field(default_factory=set)
    received: list[ReceivedSample] = field(default_factory=list)
    inflight: list = field(default_factory=list)
    response_queue: dict[str, Command] = field(default_factory=dict)
    mailbox: dict[str, Command] = field(default_factory=dict)
    command_log: list[dict] = field(default_factory=list)
    seq: int = 0

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def queue_response_command(self, cmd: Command) -> None:
        if cmd.device_id not in self.device_ids:
            raise UnknownDeviceError(cmd.device_id)
        self.response_queue[cmd.device_id] = cmd
        self.command_log.append({"event": "queued_response", **_cmd_dict(cmd)})

    def deliver(self, until: float) -> list[ReceivedSample]:
        out = []
        while self.inflight and self.inflight[0][0] <= until:
            arrival, _, samples = heapq.heappop(self.inflight)
            for s in samples:
                out.append(ReceivedSample(s, arrival))
        self.received.extend(out)
        return out


def _cmd_dict(cmd: Command) -> dict:
    return {"device_id": cmd.device_id, "sensing_interval_min": cmd.sensing_interval_min,
            "uploading_interval_min": cmd.uploading_interval_min, "issue_time": cmd.issue_time}


def upload(state: DeviceState, server: ServerState, link: LinkModel, time: float) -> ServerResponse:
    """Send the buffer to the server; the response may carry a command."""
    if not state.buffer:
        raise ValueError("upload with empty buffer")
    if not state.try_charge("upload", state.profile.e_upload):
        state.dead = True
        return ServerResponse(delivered=False, battery_depleted=True)
    rng = _stream(link.seed, _id_key(state.device_id), state.n_uploads)
    state.n_uploads += 1
    lost = rng.random() < link.loss_probability
    jitter = float(rng.uniform(0.0, link.jitter_s)) if link.jitter_s > 0 else 0.0
    if lost:
        return ServerResponse(delivered=False)
    arrival = time + link.latency_s + jitter
    batch, state.buffer = list(state.buffer), []
    heapq.heappush(server.inflight, (arrival, server.next_seq(), batch))
    cmd = server.response_queue.pop(state.device_id, None)
    applied = False
    if cmd is not None:
        applied = state.apply_command(cmd)
        server.command_log.append({"event": "response_applied" if applied else "response_rejected",
                                   "time": time, **_cmd_dict(cmd)})
    return ServerResponse(True, arrival, cmd, applied)


def send_short_message(server: ServerState, command: Command) -> None:
    """Leave a command for the device to pick up at its next wake tick."""
    if command.device_id not in server.device_ids:
        raise UnknownDeviceError(command.device_id)
    held = server.mailbox.get(command.device_id)
    if held is None or command.issue_time >= held.issue_time:
        server.mailbox[command.device_id] = command
    server.command_log.append({"event": "short_message", **_cmd_dict(command)})


@dataclass
class ScheduledCommand:
    command: Command
    via: str = "short_message"  # or "response"


@dataclass
class SimulationSetup:
    field: Field
    devices: list[DeviceState]
    duration_min: int
    link: LinkModel = field(default_factory=LinkModel)
    commands: list[ScheduledCommand] = field(default_factory=list)
    policy: IntervalPolicy | None = None


@dataclass
class SimulationTrace:
    received: list[ReceivedSample]
    sense_counts: dict[str, int]
    upload_events: dict[str, int]
    ledgers: dict[str, dict]
    command_log: list[dict]
    undelivered: list[dict]
    deaths: dict[str, float]
    duration_min: int

    def samples_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SAMPLE_CSV_SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for r in self.received:
            s = r.sample
            w.writerow([s.device_id, *map(repr, s.position), repr(s.time), repr(s.pm25), repr(s.pm10),
                        s.flag, repr(r.arrival_time)])
        return buf.getvalue()

    def ledger_json(self) -> str:
        return json.dumps(self.ledgers, indent=2, sort_keys=True)

    def summary(self) -> dict:
        return {
            "duration_min": self.duration_min,
            "received": len(self.received),
            "sense_counts": self.sense_counts,
            "upload_events": self.upload_events,
            "deaths": self.deaths,
            "command_log": self.command_log,
            "undelivered_commands": self.undelivered,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _ledger(state: DeviceState) -> dict:
    spent = sum(state.ledger.values())
    return {
        "kind": state.kind,
        "initial_units": state.initial_charge,
        "final_units": state.charge,
        "entries_units": dict(state.ledger),
        "consumed_units": spent,
        "initial_mAh": to_mah(state.initial_charge),
        "final_mAh": to_mah(state.charge),
        "entries_mAh": {k: to_mah(v) for k, v in state.ledger.items()},
        "unit": "1e-9 mAh",
    }


def run_simulation(setup: SimulationSetup) -> SimulationTrace:
    devices = sorted(setup.devices, key=lambda d: d.device_id)
    ids = [d.device_id for d in devices]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate device ids")
    if setup.duration_min * TICK_SECONDS > setup.field.grid.duration:
        raise ValueError("simulation outlasts the field horizon")
    server = ServerState(device_ids=set(ids))
    pending = sorted(setup.commands, key=lambda c: c.command.issue_time)
    for c in pending:
        if c.command.device_id not in server.device_ids:
            raise UnknownDeviceError(c.command.device_id)
    assigned = {d.device_id: (d.sensing_interval_min, d.uploading_interval_min) for d in devices}
    sense_counts = {i: 0 for i in ids}
    upload_events = {i: 0 for i in ids}
    deaths: dict[str, float] = {}
    by_id = {d.device_id: d for d in devices}
    ci = 0

    for tick in range(1, setup.duration_min + 1):
        now = tick * TICK_SECONDS
        while ci < len(pending) and pending[ci].command.issue_time < now:
            sc = pending[ci]
            if sc.via == "response":
                server.queue_response_command(sc.command)
            else:
                send_short_message(server, sc.command)
            ci += 1
        for dev in devices:
            if dev.dead:
                continue
            mail = server.mailbox.get(dev.device_id)
            if mail is not None and mail.issue_time < now:
                dev.pending_command = server.mailbox.pop(dev.device_id)
            for act in step_device(dev, tick, setup.field):
                if act.kind == "sense":
                    sense_counts[dev.device_id] += 1
                elif act.kind == "upload":
                    upload_events[dev.device_id] += 1
                    resp = upload(dev, server, setup.link, now)
                    if resp.battery_depleted:
                        deaths[dev.device_id] = now
                elif act.kind in ("command_applied", "command_rejected"):
                    server.command_log.append({"event": act.kind, "time": now, **_cmd_dict(act.command)})
                elif act.kind == "dead":
                    deaths[dev.device_id] = now
        arrived = server.deliver(now)
        if setup.policy is not None and arrived:
            _apply_policy(setup.policy, server, by_id, assigned, now)
    server.deliver(math.inf)

    undelivered = [{"via": "short_message", **_cmd_dict(c)} for _, c in sorted(server.mailbox.items())]
    undelivered += [{"via": "response", **_cmd_dict(c)} for _, c in sorted(server.response_queue.items())]
    undelivered += [{"via": "short_message", **_cmd_dict(c.command)} for c in pending[ci:]]
    return SimulationTrace(
        received=server.received,
        sense_counts=sense_counts,
        upload_events=upload_events,
        ledgers={d.device_id: _ledger(d) for d in devices},
        command_log=server.command_log,
        undelivered=undelivered,
        deaths=deaths,
        duration_min=setup.duration_min,
    )


def _apply_policy(policy: IntervalPolicy, server: ServerState, devices: dict[str, DeviceState],
                  assigned: dict[str, tuple[int, int]], now: float) -> None:
    """Re-target ground devices from the latest ground-level mean PM2.5."""
    latest: dict[str, float] = {}
    for r in server.received:
        if devices[r.sample.device_id].kind == "ground":
            latest[r.sample.device_id] = r.sample.pm25
    if not latest:
        return
    proxy = float(np.mean([latest[k] for k in sorted(latest)]))
    target = adapt_intervals(policy, proxy)
    for dev_id in sorted(devices):
        dev = devices[dev_id]
        if dev.kind != "ground" or dev.dead or assigned[dev_id] == target:
            continue
        assigned[dev_id] = target
        server.queue_response_command(Command(dev_id, target[0], target[1], now))
