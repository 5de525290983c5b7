"""Device energy model, battery duration and the AQI-adaptive interval rule."""
from __future__ import annotations

import math
from dataclasses import dataclass

MINUTES_PER_DAY = 1440

# Charges are tracked in integer nano-mAh so ledgers add up exactly.
UNITS_PER_MAH = 10**9


def to_units(mah: float) -> int:
    return int(round(mah * UNITS_PER_MAH))


def to_mah(units: int) -> float:
    return units / UNITS_PER_MAH


@dataclass(frozen=True)
class PowerProfile:
    """Per-event charge costs in mAh at nominal voltage.

    The defaults put sensing plus uploading at ~85% of daily consumption at
    the (30, 60) minute intervals, which gives about 100 days on a 13600 mAh
    pack.
    """

    e_wake: float = 0.004
    e_sense: float = 1.2
    e_upload: float = 2.4
    e_sleep_per_min: float = 0.010
    capacity_mAh: float = 13600.0

    def __post_init__(self):
        if min(self.e_wake, self.e_sense, self.e_upload, self.e_sleep_per_min) < 0:
            raise ValueError("per-event costs must be >= 0")
        if not self.capacity_mAh > 0:
            raise ValueError("capacity_mAh must be > 0")

    def daily_breakdown(self, sense_min: float, upload_min: float) -> dict[str, float]:
        if sense_min < 1 or upload_min < 1:
            raise ValueError("intervals must be >= 1 minute")
        return {
            "wake": MINUTES_PER_DAY * self.e_wake,
            "sleep": MINUTES_PER_DAY * self.e_sleep_per_min,
            "sense": MINUTES_PER_DAY / sense_min * self.e_sense,
            "upload": MINUTES_PER_DAY / upload_min * self.e_upload,
        }

    def active_share(self, sense_min: float = 30, upload_min: float = 60) -> float:
        """Fraction of daily charge spent on sensing and uploading."""
        b = self.daily_breakdown(sense_min, upload_min)
        return (b["sense"] + b["upload"]) / sum(b.values())


def battery_duration(profile: PowerProfile, intervals: tuple[float, float]) -> float:
    """Hours a full battery lasts at steady state for (sense_min, upload_min)."""
    daily = sum(profile.daily_breakdown(*intervals).values())
    if daily <= 0:
        raise ValueError("profile consumes no charge; duration is unbounded")
    return profile.capacity_mAh / daily * 24.0


@dataclass(frozen=True)
class IntervalPolicy:
    base_sense_min: int = 30
    base_upload_min: int = 60
    aqi_thresholds: tuple[float, ...] = (75.0, 150.0)
    scale_factors: tuple[float, ...] = (0.5, 0.5)
    floor_min: int = 1

    def __post_init__(self):
        th = list(self.aqi_thresholds)
        if th != sorted(th) or len(set(th)) != len(th):
            raise ValueError("aqi_thresholds must be strictly ascending")
        if len(self.scale_factors) != len(th):
            raise ValueError("need one scale factor per threshold")
        if any(not 0 < f <= 1 for f in self.scale_factors):
            raise ValueError("scale factors must lie in (0, 1]")
        if self.floor_min < 1 or self.base_sense_min < 1 or self.base_upload_min < 1:
            raise ValueError("intervals and floor must be >= 1 minute")


def adapt_intervals(policy: IntervalPolicy, aqi_proxy: float) -> tuple[int, int]:
    """Shrink intervals as pollution crosses thresholds."""
    factor = 1.0
    for threshold, f in zip(policy.aqi_thresholds, policy.scale_factors):
        if aqi_proxy >= threshold:
            factor *= f
    sense = max(policy.floor_min, math.floor(policy.base_sense_min * factor))
    upload = max(policy.floor_min, math.floor(policy.base_upload_min * factor))
    return sense, max(upload, sense)
