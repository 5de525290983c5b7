"""Calibration and co-temporal outlier flagging."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .netsim import Sample

EPSILON = 1.0  # µg/m³ floor on the reference value


@dataclass(frozen=True)
class OutlierParams:
    k_neighbors: int = 3
    rel_threshold: float = 0.5
    min_peers: int = 3
    bucket_s: float = 300.0

    def __post_init__(self):
        if self.k_neighbors < 1 or self.min_peers < 1:
            raise ValueError("k_neighbors and min_peers must be >= 1")
        if not self.rel_threshold > 0:
            raise ValueError("rel_threshold must be > 0")


def calibrate(sample: Sample, calibration: tuple[float, float]) -> Sample:
    gain, offset = calibration
    if not gain > 0:
        raise ValueError("calibration gain must be > 0")
    return replace(
        sample,
        pm25=max(gain * sample.pm25 + offset, 0.0),
        pm10=max(gain * sample.pm10 + offset, 0.0),
        flag="calibrated",
    )


def detect_outliers(samples: Sequence[Sample], params: OutlierParams, value: str = "pm25") -> list[bool]:
    """Flag samples whose relative error against nearby peers is too large.

    The reference for each sample is the median of its ``k_neighbors``
    nearest other samples in the batch.  Distance ties are broken by device
    id and then value, so the result does not depend on batch order.
    """
    n = len(samples)
    if n == 0:
        return []
    pos = np.array([s.position for s in samples], dtype=float)
    vals = np.array([getattr(s, value) for s in samples], dtype=float)
    ids = [s.device_id for s in samples]
    flags = []
    for i in range(n):
        peers = [j for j in range(n) if j != i]
        if len(peers) < params.min_peers:
            flags.append(False)
            continue
        d = np.linalg.norm(pos[peers] - pos[i], axis=1)
        order = sorted(range(len(peers)), key=lambda m: (d[m], ids[peers[m]], vals[peers[m]]))
        near = [vals[peers[m]] for m in order[: params.k_neighbors]]
        ref = float(np.median(near))
        flags.append(abs(vals[i] - ref) / max(ref, EPSILON) > params.rel_threshold)
    return flags


def bucket_samples(samples: Sequence[Sample], bucket_s: float) -> dict[int, list[Sample]]:
    out: dict[int, list[Sample]] = {}
    for s in samples:
        out.setdefault(int(s.time // bucket_s), []).append(s)
    return out


def preprocess(samples: Sequence[Sample], calibrations: dict[str, tuple[float, float]] | None,
               params: OutlierParams) -> list[Sample]:
    """Calibrate every sample, then flag outliers bucket by bucket.

    Flagged samples are kept (flag ``outlier``) so rejections stay auditable.
    """
    calibrations = calibrations or {}
    cal = [calibrate(s, calibrations.get(s.device_id, (1.0, 0.0))) for s in samples]
    out = list(cal)
    index = {id(s): i for i, s in enumerate(cal)}
    for _, batch in sorted(bucket_samples(cal, params.bucket_s).items()):
        for s, bad in zip(batch, detect_outliers(batch, params)):
            if bad:
                out[index[id(s)]] = replace(s, flag="outlier")
    return out
