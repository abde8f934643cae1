"""Deterministic planar ground truth and sensor synthesis.

The robot is a unicycle: a commanded speed ``v(t)`` and a yaw rate made of
the path curvature times speed plus an optional sinusoidal weave. Corners use
a raised-cosine curvature profile so the trajectory is C2. Truth is sampled
at 1 kHz and integrated with the trapezoid rule; sensors are synthesized at
their own rates by interpolating the dense truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .ekf import G_W
from .geometry import rot_z
from .preprocessing import AnchorMap, SensorStreams

TRUTH_RATE = 1000.0
SLOW_BAND = (0.12, 0.18)
FAST_BAND = (0.22, 0.26)
MAX_SPEED = 0.26
MAX_TURN_RATE = 1.76


@dataclass(frozen=True)
class MotionProfile:
    """Motion mode and path shape.

    ``speed_bounds`` is the speed band for slow/fast profiles and the slow
    band of a hybrid profile (whose fast phases use ``fast_speed_bounds``).
    ``weave_rate`` is the peak yaw rate of the sinusoidal weave added on the
    ``wave`` path; hybrid fast phases use ``fast_weave_rate``.
    """

    kind: str = "slow"
    path: str = "square"
    speed_bounds: tuple = SLOW_BAND
    fast_speed_bounds: tuple = FAST_BAND
    weave_rate: float = 0.0
    fast_weave_rate: float = 0.0
    weave_period: float = 3.0
    duration: float | None = None
    seed: int = 0
    side: tuple = (10.0, 10.0)
    corner_length: float = 1.5
    start: tuple = (0.0, 0.0)
    heading: float = 0.0
    height: float = 0.3
    ramp: float = 2.0
    speed_period: tuple | None = None
    phase_duration: tuple = (20.0, 20.0)  # hybrid (slow, fast) phase lengths, s
    max_turn_rate: float = MAX_TURN_RATE

    def __post_init__(self):
        if self.kind not in ("slow", "fast", "hybrid"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.path not in ("square", "wave", "rectangular"):
            raise ValueError(f"unknown path {self.path!r}")
        for name in ("speed_bounds", "fast_speed_bounds"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo or hi > MAX_SPEED + 1e-12:
                raise ValueError(f"infeasible {name} {(lo, hi)}; need 0 <= lo <= hi <= {MAX_SPEED}")
        if self.kind == "slow" and self.speed_bounds[1] > SLOW_BAND[1] + 1e-12:
            raise ValueError("slow profiles are limited to 0.18 m/s")
        if not (0 <= self.weave_rate <= self.max_turn_rate and 0 <= self.fast_weave_rate <= self.max_turn_rate):
            raise ValueError("weave rate outside rotational bounds")
        if self.max_turn_rate > MAX_TURN_RATE + 1e-12:
            raise ValueError(f"turn rate bound above {MAX_TURN_RATE} rad/s")
        if min(self.side) <= self.corner_length or self.corner_length <= 0:
            raise ValueError("sides must exceed the corner length")
        if self.duration is not None and self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def sides(self) -> tuple:
        a, b = self.side
        return (a, a, a, a) if self.path == "square" else (a, b, a, b)

    @property
    def loop_length(self) -> float:
        return float(sum(self.sides))


@dataclass
class GroundTruth:
    """Dense truth at 1 kHz. ``edge`` labels the path element: 2k straight edge k, 2k+1 corner k."""

    t: np.ndarray
    position: np.ndarray  # (n, 3)
    yaw: np.ndarray
    speed: np.ndarray
    yaw_rate: np.ndarray
    accel_world: np.ndarray  # (n, 3)
    edge: np.ndarray
    arclength: np.ndarray
    profile: MotionProfile | None = None

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def _interp(self, arr, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t[0] - 1e-9) or np.any(t > self.t[-1] + 1e-9):
            raise ValueError("query outside ground-truth span")
        if arr.ndim == 1:
            return np.interp(t, self.t, arr)
        return np.stack([np.interp(t, self.t, arr[:, k]) for k in range(arr.shape[1])], axis=-1)

    def position_at(self, t):
        return self._interp(self.position, t)

    def yaw_at(self, t):
        return self._interp(np.unwrap(self.yaw), t)

    def speed_at(self, t):
        return self._interp(self.speed, t)

    def yaw_rate_at(self, t):
        return self._interp(self.yaw_rate, t)

    def accel_at(self, t):
        return self._interp(self.accel_world, t)

    def edge_at(self, t):
        idx = np.clip(np.searchsorted(self.t, np.asarray(t, float), side="right") - 1, 0, self.t.size - 1)
        return self.edge[idx]

    def rotation_at(self, t):
        return rot_z(self.yaw_at(t))


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)


def _smoothstep_d(x):
    inside = (x > 0) & (x < 1)
    x = np.clip(x, 0.0, 1.0)
    return np.where(inside, 30.0 * x * x * (1.0 - x) ** 2, 0.0)


def _phase_mix(t, profile: MotionProfile):
    """Fraction of 'fast' behaviour at time t (0 for slow, 1 for fast, blended for hybrid)."""
    if profile.kind == "slow":
        return np.zeros_like(t), np.zeros_like(t)
    if profile.kind == "fast":
        return np.ones_like(t), np.zeros_like(t)
    ds, df = profile.phase_duration
    period = ds + df
    blend = min(2.0, 0.25 * min(ds, df))
    tau = np.mod(t, period)
    # rise at ds, fall at period (wraps to 0)
    up = _smoothstep((tau - ds) / blend)
    down = _smoothstep((tau - (period - blend)) / blend)
    mix = up - down
    dmix = (_smoothstep_d((tau - ds) / blend) - _smoothstep_d((tau - (period - blend)) / blend)) / blend
    return mix, dmix


def _speed_profile(t, profile: MotionProfile, rng):
    """Speed and its derivative. Includes the start ramp."""
    fast = profile.kind == "fast"
    if profile.speed_period is not None:
        ps, pf = profile.speed_period
    else:
        ps, pf = float(rng.uniform(20.0, 40.0)), float(rng.uniform(4.0, 8.0))
    phs, phf = rng.uniform(0, 2 * math.pi, 2)

    def band(bounds, period, ph):
        lo, hi = bounds
        mid, amp = 0.5 * (lo + hi), 0.5 * (hi - lo)
        w = 2 * math.pi / period
        return mid + amp * np.sin(w * t + ph), amp * w * np.cos(w * t + ph)

    if profile.kind == "slow":
        v, dv = band(profile.speed_bounds, ps, phs)
    elif fast:
        v, dv = band(profile.speed_bounds, pf, phf)
    else:
        vs, dvs = band(profile.speed_bounds, ps, phs)
        vf, dvf = band(profile.fast_speed_bounds, pf, phf)
        m, dm = _phase_mix(t, profile)
        v = (1 - m) * vs + m * vf
        dv = (1 - m) * dvs + m * dvf + dm * (vf - vs)
    if profile.ramp > 0:
        r = _smoothstep(t / profile.ramp)
        dr = _smoothstep_d(t / profile.ramp) / profile.ramp
        v, dv = v * r, dv * r + v * dr
    return v, dv


def _curvature(s, profile: MotionProfile):
    """Signed curvature and element label at arclength ``s`` along the looped path."""
    sides = profile.sides
    c = profile.corner_length
    L = profile.loop_length
    s = np.mod(s, L)
    k = np.zeros_like(s)
    lab = np.zeros(s.shape, dtype=int)
    start = 0.0
    for e, side in enumerate(sides):
        straight = side - c
        in_corner = (s >= start + straight) & (s < start + side)
        x = (s - start - straight) / c
        k = np.where(in_corner, (math.pi / 2) / c * (1.0 - np.cos(2 * math.pi * x)), k)
        lab = np.where((s >= start) & (s < start + straight), 2 * e, lab)
        lab = np.where(in_corner, 2 * e + 1, lab)
        start += side
    return k, lab


def generate_ground_truth(profile: MotionProfile) -> GroundTruth:
    """Dense C2 planar trajectory for ``profile`` (deterministic in its seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(profile.seed).spawn(1)[0])
    v_max = max(profile.speed_bounds[1], profile.fast_speed_bounds[1] if profile.kind == "hybrid" else 0.0)
    if profile.duration is not None:
        T = float(profile.duration)
    else:
        vmean = 0.5 * sum(profile.speed_bounds) if profile.kind != "fast" else 0.5 * sum(profile.speed_bounds)
        if profile.kind == "hybrid":
            vmean = 0.5 * (0.5 * sum(profile.speed_bounds) + 0.5 * sum(profile.fast_speed_bounds))
        if vmean <= 0:
            raise ValueError("a zero-speed profile needs an explicit duration")
        T = profile.loop_length / (0.5 * vmean) + profile.ramp + 10.0  # generous, trimmed below
    n = int(round(T * TRUTH_RATE)) + 1
    t = np.arange(n) / TRUTH_RATE
    v, dv = _speed_profile(t, profile, rng)
    weave_phase = float(rng.uniform(0, 2 * math.pi))
    mix, _ = _phase_mix(t, profile)
    if profile.path == "wave" and v_max > 0:
        amp = profile.weave_rate * (1 - mix) + profile.fast_weave_rate * mix
        if profile.kind == "fast":
            amp = np.full_like(t, profile.fast_weave_rate if profile.fast_weave_rate > 0 else profile.weave_rate)
        w_weave = amp * np.cos(2 * math.pi * t / profile.weave_period + weave_phase)
        if profile.ramp > 0:
            w_weave = w_weave * _smoothstep(t / profile.ramp)
    else:
        w_weave = np.zeros_like(t)
    h = 1.0 / TRUTH_RATE
    s = np.zeros(n)
    s[1:] = np.cumsum(0.5 * (v[1:] + v[:-1]) * h)
    kappa, lab = _curvature(s, profile)
    w = v * kappa + w_weave
    yaw = profile.heading + np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * h)])
    c, sn = np.cos(yaw), np.sin(yaw)
    x = profile.start[0] + np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] * c[1:] + v[:-1] * c[:-1]) * h)])
    y = profile.start[1] + np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] * sn[1:] + v[:-1] * sn[:-1]) * h)])
    if profile.duration is None:
        end = int(np.searchsorted(s, profile.loop_length))
        end = min(end + 1, n)
        t, v, dv, w, yaw, x, y, s, lab = (a[:end] for a in (t, v, dv, w, yaw, x, y, s, lab))
    if np.max(np.abs(w), initial=0.0) > profile.max_turn_rate + 1e-9:
        raise ValueError(f"profile needs yaw rate {np.max(np.abs(w)):.3f} rad/s above bound {profile.max_turn_rate}")
    acc = np.zeros((t.size, 3))
    acc[:, 0] = dv * np.cos(yaw) - v * w * np.sin(yaw)
    acc[:, 1] = dv * np.sin(yaw) + v * w * np.cos(yaw)
    pos = np.column_stack([x, y, np.full(t.size, profile.height)])
    return GroundTruth(t=t, position=pos, yaw=yaw, speed=v, yaw_rate=w, accel_world=acc,
                       edge=lab, arclength=s, profile=profile)


# ----------------------------------------------------------------------------
# Scenes and noise
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorNoiseConfig:
    """Noise settings; IMU entries in datasheet units, converted by the properties."""

    uwb_bias: float = -0.0552
    uwb_sigma: float = 0.0514
    odom_scale: float = 0.005
    odom_v_sigma: float = 0.01
    odom_w_sigma: float = 0.02
    vrw: float = 0.035  # m/s/sqrt(h)
    accel_bias_mg: float = 0.2  # mg
    arw: float = 1.03  # deg/sqrt(h)
    gyro_bias_dph: float = 8.23  # deg/h
    outlier_rate: float = 0.02
    outlier_min: float = 0.5
    outlier_max: float = 3.0

    def __post_init__(self):
        for name in ("uwb_sigma", "odom_v_sigma", "odom_w_sigma", "vrw", "arw", "accel_bias_mg", "gyro_bias_dph"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")
        if self.outlier_max < self.outlier_min or self.outlier_min < 0:
            raise ValueError("outlier magnitude range invalid")

    @classmethod
    def zero(cls) -> "SensorNoiseConfig":
        return cls(uwb_bias=0.0, uwb_sigma=0.0, odom_scale=0.0, odom_v_sigma=0.0, odom_w_sigma=0.0,
                   vrw=0.0, accel_bias_mg=0.0, arw=0.0, gyro_bias_dph=0.0, outlier_rate=0.0)

    @property
    def accel_density(self) -> float:
        return self.vrw / 60.0

    @property
    def gyro_density(self) -> float:
        return math.radians(self.arw) / 60.0

    @property
    def accel_bias(self) -> float:
        return self.accel_bias_mg * 1e-3 * G_W[2]

    @property
    def gyro_bias(self) -> float:
        return math.radians(self.gyro_bias_dph) / 3600.0


@dataclass(frozen=True)
class SceneConfig:
    anchors: AnchorMap = field(default_factory=AnchorMap)
    uwb_rate: float = 32.0
    odom_rate: float = 28.0
    imu_rate: float = 127.0
    schedule: tuple | None = None  # ((t0, t1, (ids...)), ...); None = all visible

    def __post_init__(self):
        if not isinstance(self.anchors, AnchorMap):
            object.__setattr__(self, "anchors", AnchorMap(self.anchors))
        if min(self.uwb_rate, self.odom_rate, self.imu_rate) <= 0:
            raise ValueError("sensor rates must be positive")


ANCHOR_HEIGHT = 1.2

SCENE_ANCHORS = {
    "corridor": {"A0": (0.88, 2.99), "A1": (3.36, 13.64), "A2": (15.01, -0.19), "A3": (17.03, 10.65)},
    "exhibition": {"B0": (4.52, 10.68), "B1": (-1.71, -2.29)},
    "office": {"C0": (10.20, 3.94), "C1": (6.23, -2.33), "C2": (-0.51, 0.18)},
}


def scene_anchors(name: str, height: float = ANCHOR_HEIGHT) -> AnchorMap:
    return AnchorMap({k: (x, y, height) for k, (x, y) in SCENE_ANCHORS[name].items()})


@dataclass
class SimulatedDataset:
    streams: SensorStreams
    truth: GroundTruth
    anchors: AnchorMap
    uwb_outlier: np.ndarray  # True where an outlier was injected
    gyro_bias: np.ndarray
    accel_bias: np.ndarray


def _grid(rate, t0, t1, offset=0.0):
    n = int(math.floor((t1 - t0 - offset) * rate + 1e-9)) + 1
    return np.round(t0 + offset + np.arange(max(n, 0)) / rate, 9)


def synthesize_sensors(truth: GroundTruth, scene: SceneConfig, noise: SensorNoiseConfig, seed: int) -> SimulatedDataset:
    """Sample IMU, odometer and UWB streams from ``truth`` (deterministic in ``seed``)."""
    ss = np.random.SeedSequence(seed)
    r_imu, r_odom, r_uwb, r_out, r_bias = (np.random.default_rng(s) for s in ss.spawn(5))
    t0, t1 = float(truth.t[0]), float(truth.t[-1])

    # IMU
    ti = _grid(scene.imu_rate, t0, t1)
    bg = r_bias.normal(0.0, noise.gyro_bias, 3) if noise.gyro_bias > 0 else np.zeros(3)
    ba = r_bias.normal(0.0, noise.accel_bias, 3) if noise.accel_bias > 0 else np.zeros(3)
    yaw = truth.yaw_at(ti)
    gyro = np.zeros((ti.size, 3))
    gyro[:, 2] = truth.yaw_rate_at(ti)
    Rt = np.swapaxes(rot_z(yaw), -1, -2)
    accel = np.einsum("nij,nj->ni", Rt, truth.accel_at(ti) + G_W)
    sg = noise.gyro_density * math.sqrt(scene.imu_rate)
    sa = noise.accel_density * math.sqrt(scene.imu_rate)
    gyro = gyro + bg + (r_imu.normal(0.0, sg, gyro.shape) if sg > 0 else 0.0)
    accel = accel + ba + (r_imu.normal(0.0, sa, accel.shape) if sa > 0 else 0.0)

    # Odometer
    to = _grid(scene.odom_rate, t0, t1)
    k = 1.0 + noise.odom_scale
    ov = k * truth.speed_at(to) + (r_odom.normal(0.0, noise.odom_v_sigma, to.size) if noise.odom_v_sigma > 0 else 0.0)
    ow = k * truth.yaw_rate_at(to) + (r_odom.normal(0.0, noise.odom_w_sigma, to.size) if noise.odom_w_sigma > 0 else 0.0)

    # UWB: anchors interleaved within each ranging cycle
    ids = scene.anchors.ids()
    na = max(len(ids), 1)
    ut, ua = [], []
    for n_, aid in enumerate(ids):
        g = _grid(scene.uwb_rate, t0, t1, offset=n_ / (scene.uwb_rate * na))
        ut.append(g)
        ua.append(np.full(g.size, aid, dtype=object))
    if ut:
        ut = np.concatenate(ut)
        ua = np.concatenate(ua)
        order = np.lexsort((np.array([ids.index(a) for a in ua]), ut))
        ut, ua = ut[order], ua[order]
    else:
        ut, ua = np.zeros(0), np.zeros(0, dtype=object)
    P = truth.position_at(ut) if ut.size else np.zeros((0, 3))
    A = np.array([scene.anchors[a] for a in ua]).reshape(-1, 3)
    rng_true = np.linalg.norm(P - A, axis=1)
    err = r_uwb.normal(noise.uwb_bias, noise.uwb_sigma, ut.size) if noise.uwb_sigma > 0 else np.full(ut.size, noise.uwb_bias)
    outlier = r_out.random(ut.size) < noise.outlier_rate
    mag = r_out.uniform(noise.outlier_min, noise.outlier_max, ut.size)
    rng_meas = rng_true + err + np.where(outlier, mag, 0.0)
    rng_meas = np.maximum(rng_meas, 1e-3)
    streams = SensorStreams(imu_t=ti, gyro=gyro, accel=accel, odom_t=to, odom_v=ov, odom_w=ow,
                            uwb_t=ut, uwb_anchor=ua, uwb_range=rng_meas,
                            uwb_sigma=np.full(ut.size, noise.uwb_sigma if noise.uwb_sigma > 0 else 0.0514))
    ds = SimulatedDataset(streams=streams, truth=truth, anchors=scene.anchors, uwb_outlier=outlier,
                          gyro_bias=bg, accel_bias=ba)
    if scene.schedule is not None:
        ds = inject_visibility(ds, scene.schedule)
    return ds


def visible_mask(t, anchor_ids, schedule) -> np.ndarray:
    t = np.asarray(t, float)
    keep = np.zeros(t.size, dtype=bool)
    for t_a, t_b, ids in schedule:
        if t_b < t_a:
            raise ValueError(f"schedule interval ({t_a}, {t_b}) is reversed")
        sel = (t >= t_a) & (t < t_b)
        keep |= sel & np.isin(anchor_ids, list(ids))
    return keep


def inject_visibility(data, schedule):
    """Drop UWB records whose anchor is not listed as visible at their time.

    Accepts a :class:`SimulatedDataset` or :class:`SensorStreams`.
    """
    if schedule is None:
        return data
    streams = data.streams if isinstance(data, SimulatedDataset) else data
    keep = visible_mask(streams.uwb_t, streams.uwb_anchor, schedule)
    new = replace(streams, uwb_t=streams.uwb_t[keep], uwb_anchor=streams.uwb_anchor[keep],
                  uwb_range=streams.uwb_range[keep], uwb_sigma=streams.uwb_sigma[keep])
    if isinstance(data, SimulatedDataset):
        return replace(data, streams=new, uwb_outlier=data.uwb_outlier[keep])
    return new


def edge_schedule(truth: GroundTruth, edge_anchors: dict) -> tuple:
    """Visibility intervals from the path element the robot is on.

    ``edge_anchors`` maps element labels (2k straight edge k, 2k+1 corner k)
    to the tuple of visible anchor ids. Unlisted elements see nothing.
    """
    lab = truth.edge
    change = np.flatnonzero(np.diff(lab)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [lab.size - 1]])
    out = []
    for a, b in zip(starts, ends):
        ids = tuple(edge_anchors.get(int(lab[a]), ()))
        t_end = float(truth.t[b]) if b < lab.size - 1 else float(truth.t[-1]) + 1.0
        out.append((float(truth.t[a]), t_end, ids))
    return tuple(out)


def simulate(profile: MotionProfile, scene: SceneConfig, noise: SensorNoiseConfig, seed: int | None = None,
             edge_anchors: dict | None = None) -> SimulatedDataset:
    """Truth plus sensors in one call; ``edge_anchors`` builds a path-following schedule."""
    truth = generate_ground_truth(profile)
    if edge_anchors is not None:
        scene = replace(scene, schedule=edge_schedule(truth, edge_anchors))
    return synthesize_sensors(truth, scene, noise, profile.seed if seed is None else seed)
