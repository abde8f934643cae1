"""Continuous-time UWB/IMU/odometer estimator: EKF front end, gating, VAs and sliding-window smoothing."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .backend import (
    FactorGraphWindow,
    FactorStore,
    LMReport,
    LMSettings,
    MarginalPrior,
    WindowConfig,
    WindowPolicy,
    _Eval,
    control_point_density,
    optimize_window,
    preintegrate_imu_blocks,
    preintegrate_odom_blocks,
    slide_and_marginalize,
    window_length,
)
from .ekf import (
    AdaptiveGateParams,
    FilterHistory,
    FilterState,
    ImuNoise,
    OdomNoise,
    PlanarConstraint,
    run_filter,
)
from .geometry import Rotation, rot_z, wrap_angle
from .preprocessing import AnchorMap, RangeGate, SensorStreams, UwbRangeMeasurement
from .spline import KnotBinConfig, KnotVector, TrajectorySpline, assign_ncp, compute_motion_variation, split_knot_span
from .virtual_anchor import VAGenerator, VAParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    window: float = 2.0  # key-pose period, s
    gamma: float = 1.25
    gate_enabled: bool = True
    gate_lag: float = 2.0
    gate_bypass: float = 2.0
    speed_floor: float = 0.01
    knot_mode: str = "adaptive"  # or "uniform"
    uniform_spacing: float = 1.0  # s, used when knot_mode == "uniform"
    bins: KnotBinConfig = KnotBinConfig(rotation_bins=(0.13, 0.20, 0.50, 1.82))
    policy: WindowPolicy = WindowPolicy()
    window_config: WindowConfig = WindowConfig()
    lm: LMSettings = LMSettings()
    va: VAParams = VAParams()
    use_imu: bool = True
    use_odom: bool = True
    imu_noise: ImuNoise = ImuNoise()
    odom_noise: OdomNoise = OdomNoise()
    ekf_params: AdaptiveGateParams = AdaptiveGateParams()
    block_min: float = 0.25  # shortest preintegration block, s
    imu_floor: tuple = (2e-3, 5e-3, 2e-3)  # yaw rad, velocity m/s, position m per block
    odom_floor: tuple = (2e-3, 2e-3)  # yaw rad, displacement m per block
    range_bias: float = 0.0  # subtracted from every range
    init_sigma: tuple = (0.05, 0.05, math.radians(2.0))
    cp_prior_sigma: tuple = (1.0, 1.0, 0.5)  # weak pull of each control point toward its initial value

    def __post_init__(self):
        if self.knot_mode not in ("adaptive", "uniform"):
            raise ValueError(f"unknown knot mode {self.knot_mode!r}")
        if self.window <= 0 or self.gate_lag <= 0 or self.block_min <= 0 or self.uniform_spacing <= 0:
            raise ValueError("periods must be positive")


@dataclass
class InitialPose:
    t: float
    x: float
    y: float
    yaw: float
    height: float = 0.0
    speed: float = 0.0

    def filter_state(self) -> FilterState:
        R = Rotation.from_matrix(rot_z(self.yaw))
        v = (math.cos(self.yaw) * self.speed, math.sin(self.yaw) * self.speed, 0.0)
        return FilterState.initial(t=self.t, rotation=R, position=(self.x, self.y, self.height), velocity=v)


@dataclass
class PlanarTrajectory:
    """Final control points and knots; cheap batched evaluation of (x, y, yaw)."""

    knots: KnotVector
    X: np.ndarray
    height: float

    def sample(self, t) -> np.ndarray:
        ev = _Eval(self.knots, np.atleast_1d(t))
        return ev.value(self.X, ev.W0)

    def velocity(self, t) -> np.ndarray:
        ev = _Eval(self.knots, np.atleast_1d(t), vel=True)
        return ev.value(self.X, ev.W1)

    def spline(self) -> TrajectorySpline:
        n = self.X.shape[0]
        pos = np.column_stack([self.X[:, 0], self.X[:, 1], np.full(n, self.height)])
        return TrajectorySpline(KnotVector(self.knots.knots.copy()), pos, rot_z(self.X[:, 2]))

    @property
    def t_min(self) -> float:
        return self.knots.t_min

    @property
    def t_max(self) -> float:
        return self.knots.t_max


@dataclass
class EstimatorResult:
    trajectory: PlanarTrajectory
    reports: list
    window_ends: list
    n_new: list  # control points added per window
    gate: RangeGate
    n_ranges_used: int
    contexts: list
    ekf: object
    seconds: float = 0.0

    @property
    def breakpoints(self) -> np.ndarray:
        return self.trajectory.knots.breakpoints()


def _block_bounds(t0: float, t1: float, epochs, block_min: float) -> list:
    """Boundaries at ranging epochs in ``(t0, t1)``, at least ``block_min`` apart, ending at ``t1``."""
    b = [t0]
    for e in epochs:
        if e - b[-1] >= block_min and t1 - e >= 0.5 * block_min:
            b.append(float(e))
    if len(b) == 1 and t1 - t0 > 2 * block_min:
        b.extend(np.arange(t0 + block_min, t1 - 0.5 * block_min, block_min).tolist())
    b.append(t1)
    return b


class SlidingWindowEstimator:
    """Windowed smoother over a planar spline; the EKF history serves as motion prior."""

    def __init__(self, streams: SensorStreams, anchors: AnchorMap, history: FilterHistory, initial: InitialPose,
                 config: EstimatorConfig = EstimatorConfig()):
        self.s = streams
        self.anchors = anchors
        self.hist = history
        self.init = initial
        self.cfg = config
        self.height = initial.height
        self.store = FactorStore()
        self.gate = RangeGate(gamma=config.gamma, speed_floor=config.speed_floor,
                              bypass_until=initial.t + config.gate_bypass)
        self.vagen = VAGenerator(anchors, config.va)
        self.knots: KnotVector | None = None
        self.X = np.zeros((0, 3))
        self.window: FactorGraphWindow | None = None
        self.reports: list[LMReport] = []
        self.window_ends: list[float] = []
        self.n_new: list[int] = []
        self.t_done = initial.t
        self.n_ranges_used = 0
        self._ekf_yaw_t = history.view("t")
        R = history.view("R")
        self._ekf_yaw = np.unwrap(np.arctan2(R[:, 1, 0], R[:, 0, 0]))
        self._slack = 0.1

    # -- motion prior helpers ---------------------------------------------------
    def _ekf_pose(self, t):
        t = np.clip(np.atleast_1d(t), self._ekf_yaw_t[0], self._ekf_yaw_t[-1])
        p = self.hist.interpolate("p", t)
        yaw = np.interp(t, self._ekf_yaw_t, self._ekf_yaw)
        return p[:, :2], yaw

    def _anchored_prior(self, t, t_ref):
        """Spline pose at ``t_ref`` composed with the EKF motion from ``t_ref`` to ``t`` (``t_ref <= t``)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        t_ref = np.broadcast_to(np.asarray(t_ref, dtype=float), t.shape)
        if self.knots is None:
            return self._ekf_pose(t)
        ev = _Eval(self.knots, t_ref)
        xs = ev.value(self.X, ev.W0)
        p_r, y_r = self._ekf_pose(t_ref)
        p_t, y_t = self._ekf_pose(t)
        dpsi = xs[:, 2] - y_r
        c, s = np.cos(dpsi), np.sin(dpsi)
        d = p_t - p_r
        pos = xs[:, :2] + np.column_stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]])
        return pos, y_t + dpsi

    def _anchor_state(self):
        """Optimized pose at the end of the processed span and its yaw offset to the EKF."""
        _, y_e = self._ekf_pose(np.array([self.t_done]))
        if self.knots is None:
            return None, 0.0
        ev = _Eval(self.knots, np.array([self.t_done]))
        xs = ev.value(self.X, ev.W0)[0]
        return xs, float(xs[2] - y_e[0])

    def _ekf_extrapolated(self, t, t_end, anchor):
        """Prior pose at ``t``: EKF motion anchored at ``anchor`` (pose at ``t_done``), constant twist past ``t_end``."""
        t = np.asarray(t, dtype=float)
        tc = np.minimum(t, t_end)
        p, yaw = self._ekf_pose(tc)
        xs, dpsi = anchor
        c, s = math.cos(dpsi), math.sin(dpsi)
        rot = np.array([[c, -s], [s, c]])
        if xs is not None:
            p0, _ = self._ekf_pose(np.array([self.t_done]))
            p = xs[:2] + (p - p0) @ rot.T
            yaw = yaw + dpsi
        dt = t - tc
        if np.any(dt > 0):
            v = self.hist.interpolate("v", np.array([t_end]))[0, :2]
            w = self.hist.interpolate("omega", np.array([t_end]))[0, 2]
            p = p + dt[:, None] * (rot @ v)[None, :]
            yaw = yaw + dt * w
        return p, yaw

    # -- per-window stages -------------------------------------------------------
    def _gate_ranges(self, t0, t1):
        s = self.s
        lo = np.searchsorted(s.uwb_t, t0, side="right")
        hi = np.searchsorted(s.uwb_t, t1, side="right")
        idx = np.arange(lo, hi)
        if idx.size == 0:
            return idx, np.zeros(0)
        t = s.uwb_t[idx]
        r = s.uwb_range[idx] - self.cfg.range_bias
        keep = np.ones(idx.size, dtype=bool)
        if self.cfg.gate_enabled:
            t_ref = np.maximum(np.minimum(t - self.cfg.gate_lag, self.t_done), self.init.t)
            have = self.knots is not None
            pos, _ = self._anchored_prior(t, t_ref) if have else self._ekf_pose(t)
            v = self.hist.interpolate("v", np.clip(t, self._ekf_yaw_t[0], self._ekf_yaw_t[-1]))
            speed = np.hypot(v[:, 0], v[:, 1])
            for j, i in enumerate(idx):
                aid = str(s.uwb_anchor[i])
                if aid not in self.anchors:
                    keep[j] = False
                    continue
                m = UwbRangeMeasurement(float(t[j]), aid, float(max(r[j], 1e-6)), float(s.uwb_sigma[i]))
                prior = np.array([pos[j, 0], pos[j, 1], self.height])
                t_prev = float(t_ref[j]) if have else float(t[j]) - self.cfg.gate_lag
                keep[j] = self.gate.check(m, prior, float(speed[j]), min(t_prev, float(t[j])), self.anchors[aid])
        else:
            keep &= np.array([str(a) in self.anchors for a in s.uwb_anchor[idx]], dtype=bool)
        return idx[keep], r[keep]

    def _add_ranges_and_vas(self, idx, r, t1):
        s = self.s
        if idx.size == 0:
            return
        t = s.uwb_t[idx]
        A = np.stack([self.anchors[str(a)] for a in s.uwb_anchor[idx]])
        self.store.add_ranges(t, A, r, s.uwb_sigma[idx])
        self.n_ranges_used += idx.size
        if not self.cfg.va.enabled:
            return
        for j, i in enumerate(idx):
            self.vagen.add_range(float(t[j]), str(s.uwb_anchor[i]), float(r[j]), float(s.uwb_sigma[i]))

        def position_fn(tt):
            p, _ = self._ekf_pose(tt)
            return np.column_stack([p, np.full(p.shape[0], self.height)])

        dpsi = float(wrap_angle(self._anchor[1]))

        def heading_fn(t_ref):
            return dpsi

        ctxs = self.vagen.poll(position_fn, t1, heading_fn)
        if ctxs:
            vas = [v for c in ctxs for v in c.anchors]
            self.store.add_vas([v.created_at for v in vas], [v.position for v in vas],
                               [v.range for v in vas], [v.sigma for v in vas])

    def _add_blocks(self, t0, t1, epochs):
        bounds = _block_bounds(t0, t1, epochs, self.cfg.block_min)
        s = self.s
        if self.cfg.use_imu:
            mid = np.clip(np.asarray(bounds[:-1]), self._ekf_yaw_t[0], self._ekf_yaw_t[-1])
            bg = self.hist.interpolate("bg", mid)
            ba = self.hist.interpolate("ba", mid)
            blocks = preintegrate_imu_blocks(s.imu_t, s.gyro, s.accel, bounds, bg, ba, self.cfg.imu_noise,
                                             slack=self._slack)
            self.store.add_imu_blocks(blocks, self.cfg.imu_floor)
        if self.cfg.use_odom:
            blocks = preintegrate_odom_blocks(s.odom_t, s.odom_v, s.odom_w, bounds, self.cfg.odom_noise,
                                              slack=self._slack)
            self.store.add_odom_blocks(blocks, self.cfg.odom_floor)

    def _new_breakpoints(self, t0, t1):
        if self.cfg.knot_mode == "uniform":
            h = self.cfg.uniform_spacing
            start = self.init.t
            cur = t0 if self.knots is None else self.knots.t_max
            j = math.floor((cur - start) / h + 1e-9) + 1
            out = []
            while True:
                tb = start + j * h
                out.append(tb)
                if tb >= t1 - 1e-9:
                    break
                j += 1
            return out
        tt = self._ekf_yaw_t
        sel = (tt > t0) & (tt <= t1)
        v = self.hist.view("v")[sel]
        w = self.hist.view("omega")[sel]
        samples = np.column_stack([tt[sel], np.hypot(v[:, 0], v[:, 1]), w[:, 2]])
        if samples.shape[0] == 0:
            return split_knot_span((t0, t1), 1)
        n_cp = assign_ncp(compute_motion_variation(samples, (t0, t1)), self.cfg.bins)
        return split_knot_span((t0, t1), n_cp)

    def _extend(self, t0, t1):
        bp = self._new_breakpoints(t0, t1)
        if self.knots is None:
            self.knots = KnotVector.from_breakpoints([t0] + bp)
            g = self._greville(0, self.knots.n_control)
            p, yaw = self._ekf_extrapolated(g, t1, self._anchor)
            self.X = np.column_stack([p, yaw])
            self.store.add_cp_priors(0, self.X, self.cfg.cp_prior_sigma)
            self.store.add_pose_prior(self.init.t, [self.init.x, self.init.y, self.init.yaw], self.cfg.init_sigma)
            return self.knots.n_control
        if bp and bp[-1] <= self.knots.t_max + 1e-12:
            return 0
        bp = [b for b in bp if b > self.knots.t_max + 1e-9]
        n_old = self.knots.n_control
        n = self.knots.extend(bp)
        g = self._greville(n_old, n_old + n)
        p, yaw = self._ekf_extrapolated(g, t1, self._anchor)
        yaw = self.X[-1, 2] + np.unwrap(np.r_[0.0, wrap_angle(yaw - self.X[-1, 2])])[1:]
        self.X = np.vstack([self.X, np.column_stack([p, yaw])])
        self.store.add_cp_priors(n_old, self.X[n_old:], self.cfg.cp_prior_sigma)
        return n

    def _greville(self, a, b):
        k = self.knots.knots
        return np.array([k[i + 1:i + 4].mean() for i in range(a, b)])

    def step(self, t1: float) -> LMReport | None:
        """Consume data in ``(t_done, t1]`` and optimize one window."""
        t0 = self.t_done
        idx, r = self._gate_ranges(t0, t1)
        self._anchor = self._anchor_state()
        n_new = self._extend(t0, t1)
        self._add_ranges_and_vas(idx, r, t1)
        self._add_blocks(t0, t1, self.s.uwb_t[idx])
        N = self.X.shape[0]
        alpha = control_point_density(self.knots.breakpoints(), t1, self.cfg.policy.delta_T)
        n_active = min(N, max(window_length(alpha, self.cfg.policy), n_new + 5))
        first = N - n_active
        if self.window is None:
            self.window = FactorGraphWindow(self.X, self.knots, self.store, max(first, 0), self.cfg.window_config)
        else:
            first = max(first, self.window.first)
            self.window.X = self.X
            self.window._select()
            self.window, _ = slide_and_marginalize(self.window, first)
        rep = optimize_window(self.window, self.cfg.lm)
        self.X = self.window.X
        self.reports.append(rep)
        self.window_ends.append(t1)
        self.n_new.append(n_new)
        self.t_done = t1
        return rep

    def trajectory(self) -> PlanarTrajectory:
        return PlanarTrajectory(self.knots, self.X.copy(), self.height)


def window_schedule(t_start: float, t_end: float, period: float) -> list[float]:
    """Key-pose times ``t_start + k*period``; the last partial window ends at ``t_end``."""
    n = int(math.floor((t_end - t_start) / period + 1e-9))
    ends = [t_start + k * period for k in range(1, n + 1)]
    if not ends or t_end - ends[-1] > 1e-6:
        if ends and t_end - ends[-1] < 0.25 * period:
            ends[-1] = t_end
        else:
            ends.append(t_end)
    return ends


def run_smoother(streams: SensorStreams, anchors: AnchorMap, initial: InitialPose,
              config: EstimatorConfig = EstimatorConfig(), ekf=None) -> EstimatorResult:
    """Full pipeline: EKF over all inertial data, then windowed smoothing every ``config.window`` seconds."""
    t_clock = time.perf_counter()
    if ekf is None:
        ekf = run_filter(streams, initial.filter_state(), config.imu_noise, config.odom_noise, config.ekf_params,
                         PlanarConstraint(height=initial.height))
    t_end = min(float(streams.imu_t[-1]), float(streams.odom_t[-1]), float(ekf.history.span[1]))
    est = SlidingWindowEstimator(streams, anchors, ekf.history, initial, config)
    for t1 in window_schedule(initial.t, t_end, config.window):
        est.step(t1)
    return EstimatorResult(trajectory=est.trajectory(), reports=est.reports, window_ends=est.window_ends,
                           n_new=est.n_new, gate=est.gate, n_ranges_used=est.n_ranges_used,
                           contexts=list(est.vagen.contexts), ekf=ekf, seconds=time.perf_counter() - t_clock)
