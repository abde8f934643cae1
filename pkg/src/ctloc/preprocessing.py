"""Sensor records, stream merging and the range outlier gate."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .geometry import validate_monotone

log = logging.getLogger(__name__)

# Tie-break for identical timestamps when merging streams.
TYPE_PRIORITY = {"imu": 0, "odom": 1, "uwb": 2}
DEFAULT_RANGE_SIGMA = 0.0514


@dataclass(frozen=True)
class UwbRangeMeasurement:
    t: float
    anchor_id: str
    range: float
    sigma: float = DEFAULT_RANGE_SIGMA
    kind = "uwb"

    def __post_init__(self):
        if not (self.range > 0 and np.isfinite(self.range)):
            raise ValueError(f"range must be positive and finite, got {self.range!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: tuple
    accel: tuple
    kind = "imu"

    def __post_init__(self):
        g = tuple(float(x) for x in self.gyro)
        a = tuple(float(x) for x in self.accel)
        if len(g) != 3 or len(a) != 3 or not np.all(np.isfinite(g + a)):
            raise ValueError("IMU sample needs finite 3-vectors")
        object.__setattr__(self, "gyro", g)
        object.__setattr__(self, "accel", a)


@dataclass(frozen=True)
class OdomSample:
    t: float
    linear_velocity: float
    angular_velocity: float
    kind = "odom"

    def __post_init__(self):
        if not (np.isfinite(self.linear_velocity) and np.isfinite(self.angular_velocity)):
            raise ValueError("odometer sample must be finite")


class AnchorMap(dict):
    """anchor id -> 3D position (z is the mounting height)."""

    def __init__(self, anchors=None):
        super().__init__()
        for k, v in dict(anchors or {}).items():
            p = np.array(v, dtype=float).reshape(-1)
            if p.size == 2:
                p = np.append(p, 0.0)
            if p.size != 3 or not np.all(np.isfinite(p)):
                raise ValueError(f"anchor {k!r}: position must be 2 or 3 finite numbers")
            self[str(k)] = p
        pts = list(self.values())
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.allclose(pts[i], pts[j]):
                    raise ValueError("anchor positions must be distinct")

    def ids(self) -> list[str]:
        return list(self.keys())

    def positions(self) -> np.ndarray:
        return np.array([self[k] for k in self]) if self else np.zeros((0, 3))


def merge_streams(uwb: Iterable = (), imu: Iterable = (), odom: Iterable = ()) -> list:
    """Merge per-sensor time-sorted records into one stream.

    Equal timestamps are ordered IMU, then odometer, then UWB.
    """
    streams = {"uwb": list(uwb), "imu": list(imu), "odom": list(odom)}
    for name, recs in streams.items():
        validate_monotone([r.t for r in recs], name)

    def keyed(name):
        prio = TYPE_PRIORITY[name]
        return (((r.t, prio, i), r) for i, r in enumerate(streams[name]))

    iters = [keyed(name) for name in ("imu", "odom", "uwb")]
    return [r for _, r in heapq.merge(*iters, key=lambda kr: kr[0])]


@dataclass(frozen=True)
class GateResult:
    accepted: bool
    violation: float  # | |x - p| - r |
    width: float  # gamma * v * dt

    def __bool__(self) -> bool:
        return self.accepted


def reject_range_outlier(m: UwbRangeMeasurement, prior_pos, prior_speed: float, t_prev: float,
                         anchor, gamma: float, speed_floor: float = 0.0) -> GateResult:
    """Motion-consistency gate: accept iff | |x - p| - r | < gamma * v * (t - t_prev).

    ``speed_floor`` lower-bounds the speed used for the gate width; the bare
    check (floor 0) rejects every inexact range for a stationary prior.
    """
    dt = m.t - t_prev
    if not dt > 0:
        raise ValueError(f"gate reference time {t_prev!r} must precede measurement time {m.t!r}")
    predicted = float(np.linalg.norm(np.asarray(prior_pos, dtype=float) - np.asarray(anchor, dtype=float)))
    violation = abs(predicted - m.range)
    width = gamma * max(float(prior_speed), speed_floor) * dt
    return GateResult(accepted=bool(violation < width), violation=violation, width=width)


@dataclass
class RangeGate:
    """Stateful wrapper used by the pipeline: bypass window, speed floor, rejection log."""

    gamma: float = 1.25
    speed_floor: float = 0.01
    bypass_until: float = 2.0
    rejected: list = field(default_factory=list)
    n_checked: int = 0

    def check(self, m: UwbRangeMeasurement, prior_pos, prior_speed, t_prev, anchor) -> bool:
        self.n_checked += 1
        if m.t < self.bypass_until:
            return True
        res = reject_range_outlier(m, prior_pos, prior_speed, t_prev, anchor, self.gamma, self.speed_floor)
        if not res.accepted:
            self.rejected.append((m.t, m.anchor_id, m.range, res.violation, res.width))
            log.debug("range rejected t=%.6f anchor=%s violation=%.3f width=%.3f",
                      m.t, m.anchor_id, res.violation, res.width)
        return res.accepted


@dataclass
class SensorStreams:
    """Column-oriented view of a dataset, the form the estimators consume."""

    imu_t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    odom_t: np.ndarray
    odom_v: np.ndarray
    odom_w: np.ndarray
    uwb_t: np.ndarray
    uwb_anchor: np.ndarray  # anchor ids (str)
    uwb_range: np.ndarray
    uwb_sigma: np.ndarray

    @classmethod
    def from_records(cls, uwb=(), imu=(), odom=()) -> "SensorStreams":
        uwb, imu, odom = list(uwb), list(imu), list(odom)
        for name, recs in (("uwb", uwb), ("imu", imu), ("odom", odom)):
            validate_monotone([r.t for r in recs], name)
        return cls(
            imu_t=np.array([r.t for r in imu], dtype=float),
            gyro=np.array([r.gyro for r in imu], dtype=float).reshape(-1, 3),
            accel=np.array([r.accel for r in imu], dtype=float).reshape(-1, 3),
            odom_t=np.array([r.t for r in odom], dtype=float),
            odom_v=np.array([r.linear_velocity for r in odom], dtype=float),
            odom_w=np.array([r.angular_velocity for r in odom], dtype=float),
            uwb_t=np.array([r.t for r in uwb], dtype=float),
            uwb_anchor=np.array([r.anchor_id for r in uwb], dtype=object),
            uwb_range=np.array([r.range for r in uwb], dtype=float),
            uwb_sigma=np.array([r.sigma for r in uwb], dtype=float),
        )

    def records(self):
        """Back to per-sensor record lists ``(uwb, imu, odom)``."""
        uwb = [UwbRangeMeasurement(float(t), str(a), float(r), float(s))
               for t, a, r, s in zip(self.uwb_t, self.uwb_anchor, self.uwb_range, self.uwb_sigma)]
        imu = [ImuSample(float(t), tuple(g), tuple(a)) for t, g, a in zip(self.imu_t, self.gyro, self.accel)]
        odom = [OdomSample(float(t), float(v), float(w)) for t, v, w in zip(self.odom_t, self.odom_v, self.odom_w)]
        return uwb, imu, odom

    @property
    def t_start(self) -> float:
        firsts = [a[0] for a in (self.imu_t, self.odom_t, self.uwb_t) if a.size]
        return float(min(firsts)) if firsts else 0.0

    @property
    def t_end(self) -> float:
        lasts = [a[-1] for a in (self.imu_t, self.odom_t, self.uwb_t) if a.size]
        return float(max(lasts)) if lasts else 0.0
