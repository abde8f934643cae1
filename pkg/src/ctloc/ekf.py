"""Error-state EKF fusing IMU propagation with odometer relative-motion updates.

The odometer update compares the planar motion integrated from wheel twists
with the same quantity predicted from the IMU-propagated poses at both ends of
the interval. The pose at the start of the interval is carried as a stochastic
clone so its uncertainty and correlation enter the update. Updates pass
through an adaptive windowed chi-square test on the normalized innovation.

Frames: ``R`` maps body to world. Specific force is ``R^T (p'' + G_W)`` with
``G_W = (0, 0, 9.81)``, so a level IMU at rest reads ``+9.81`` on z.

Error state (15): rotation (body-frame right perturbation), position,
velocity, gyro bias, accel bias. The clone appends rotation and position (6).
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Rotation,
    exp_so3,
    exp_so3_single,
    log_so3,
    wrap_angle,
    yaw_of,
)
from .preprocessing import ImuSample, OdomSample

log = logging.getLogger(__name__)

GRAVITY = 9.81
G_W = np.array([0.0, 0.0, GRAVITY])
MAX_DT = 0.1

_TH, _P, _V, _BG, _BA = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
_CTH, _CP = slice(15, 18), slice(18, 21)
_I3 = np.eye(3)


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time IMU noise densities."""

    gyro: float = 1.03 * math.pi / 180 / 60  # rad/s/sqrt(Hz)
    accel: float = 0.035 / 60  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1e-6  # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 1e-5  # m/s^3/sqrt(Hz)
    gyro_bias_sigma: float = 8.23 * math.pi / 180 / 3600  # rad/s, turn-on
    accel_bias_sigma: float = 0.2e-3 * GRAVITY  # m/s^2, turn-on


@dataclass(frozen=True)
class OdomNoise:
    """Per-sample wheel twist noise and a fractional scale allowance."""

    v_sigma: float = 0.01
    w_sigma: float = 0.02
    scale: float = 0.005
    floor: float = 1e-4


@dataclass(frozen=True)
class AdaptiveGateParams:
    xi: int = 50
    mu: float = 0.5
    alpha: float = 3.17e-3
    lambda_min: float = 0.56
    lambda_max: float = 6.52
    thr: float = 10.85
    enabled: bool = True

    def __post_init__(self):
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be below lambda_max")
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mu must lie in (0, 1)")
        if not self.alpha > 0 or self.xi < 1:
            raise ValueError("alpha must be positive and xi >= 1")


@dataclass
class FilterState:
    t: float
    rotation: Rotation
    position: np.ndarray
    velocity: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    covariance: np.ndarray  # 15 x 15

    @classmethod
    def initial(cls, t=0.0, rotation=None, position=(0, 0, 0), velocity=(0, 0, 0),
                sigmas=None) -> "FilterState":
        s = dict(rot=math.radians(1.0), yaw=math.radians(2.0), pos=0.05, vel=0.05,
                 bg=ImuNoise.gyro_bias_sigma, ba=ImuNoise.accel_bias_sigma)
        s.update(sigmas or {})
        d = np.r_[s["rot"], s["rot"], s["yaw"], [s["pos"]] * 3, [s["vel"]] * 3, [s["bg"]] * 3, [s["ba"]] * 3]
        return cls(t=float(t), rotation=rotation or Rotation.identity(),
                   position=np.array(position, dtype=float), velocity=np.array(velocity, dtype=float),
                   gyro_bias=np.zeros(3), accel_bias=np.zeros(3), covariance=np.diag(d ** 2))

    def copy(self) -> "FilterState":
        return FilterState(self.t, self.rotation, self.position.copy(), self.velocity.copy(),
                           self.gyro_bias.copy(), self.accel_bias.copy(), self.covariance.copy())


@dataclass
class OdomObservation:
    """Planar relative motion over ``interval``.

    ``yaw`` follows the odometer sign convention (clockwise positive, i.e. the
    negated heading change); ``displacement`` is (forward, left) in the body
    frame at the start of the interval.
    """

    yaw: float
    displacement: np.ndarray
    interval: tuple
    covariance: np.ndarray = field(default_factory=lambda: np.diag([1e-6, 1e-6, 1e-6]))

    def __post_init__(self):
        if not self.interval[1] > self.interval[0]:
            raise ValueError("odometer interval must be positive")

    def vector(self) -> np.ndarray:
        return np.array([self.yaw, self.displacement[0], self.displacement[1]])


@dataclass
class InnovationStats:
    """Adaptive window state for the windowed chi-square test."""

    xi: int = 50
    M: int = 1
    history: deque = None
    e_k: float = 0.0
    E_k: float = 0.0
    last_innovation: np.ndarray | None = None

    def __post_init__(self):
        if self.history is None:
            self.history = deque(maxlen=self.xi)

    def copy(self) -> "InnovationStats":
        out = InnovationStats(self.xi, self.M, deque(self.history, maxlen=self.xi), self.e_k, self.E_k,
                              self.last_innovation)
        return out


def adapt_M(e_k: float, params: AdaptiveGateParams) -> int:
    """Window size from the current normalized innovation (three branches, clamped)."""
    if e_k >= params.lambda_max:
        m = 1.0
    elif e_k <= params.lambda_min:
        m = float(params.xi)
    else:
        expo = (e_k - params.lambda_min) / params.alpha
        # mu < 1, so large exponents underflow toward 0 and clamp to 1 below
        m = params.xi * math.exp(min(expo * math.log(params.mu), 0.0)) if expo < 1e300 else 0.0
    return int(min(max(round(m), 1), params.xi))


# ----------------------------------------------------------------------------
# Propagation
# ----------------------------------------------------------------------------

def _process_noise(noise: ImuNoise, dt: float) -> np.ndarray:
    q = np.zeros(15)
    q[_TH] = noise.gyro ** 2 * dt
    q[_V] = noise.accel ** 2 * dt
    q[_P] = noise.accel ** 2 * dt ** 3 / 3.0
    q[_BG] = noise.gyro_bias_walk ** 2 * dt
    q[_BA] = noise.accel_bias_walk ** 2 * dt
    return q


def _hat3(x, y, z):
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


_F_TEMPLATE = np.eye(15)


def _strapdown(R, p, v, bg, ba, gyro, accel, dt):
    """One strapdown step; returns the new nominal state and the 15x15 transition."""
    w = gyro - bg
    a = accel - ba
    dR = exp_so3_single(w * dt)
    Ra = R @ a
    acc = Ra - G_W
    p_new = p + v * dt + 0.5 * dt * dt * acc
    v_new = v + dt * acc
    R_new = R @ dR
    F = _F_TEMPLATE.copy()
    F[0:3, 0:3] = dR.T
    F[0, 9] = F[1, 10] = F[2, 11] = -dt
    RA = R @ _hat3(a[0], a[1], a[2])
    h2 = 0.5 * dt * dt
    F[3:6, 0:3] = -h2 * RA
    F[3, 6] = F[4, 7] = F[5, 8] = dt
    F[3:6, 12:15] = -h2 * R
    F[6:9, 0:3] = -dt * RA
    F[6:9, 12:15] = -dt * R
    return R_new, p_new, v_new, F


def predict(state: FilterState, imu: ImuSample, dt: float, noise: ImuNoise = ImuNoise()) -> FilterState:
    """Propagate ``state`` by ``dt`` holding ``imu`` constant over the step."""
    if not (dt > 0.0 and dt <= MAX_DT):
        raise ValueError(f"propagation step {dt!r} s outside (0, {MAX_DT}]")
    R_new, p_new, v_new, F = _strapdown(state.rotation.matrix(), state.position, state.velocity,
                                        state.gyro_bias, state.accel_bias,
                                        np.asarray(imu.gyro, float), np.asarray(imu.accel, float), dt)
    P = F @ state.covariance @ F.T
    P[np.diag_indices(15)] += _process_noise(noise, dt)
    P = 0.5 * (P + P.T)
    return FilterState(state.t + dt, Rotation.from_matrix(R_new), p_new, v_new,
                       state.gyro_bias.copy(), state.accel_bias.copy(), P)


# ----------------------------------------------------------------------------
# Odometer observation
# ----------------------------------------------------------------------------

def _trapezoid_cum(f: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f, dtype=float)
    out[1:] = np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(t))
    return out


def form_odom_observation(window, noise: OdomNoise = OdomNoise()) -> OdomObservation:
    """Integrate wheel twists over the window with the trapezoid rule.

    theta = -int w dt;  d = (int v cos theta dt, -int v sin theta dt).
    """
    samples = list(window)
    if not samples:
        raise ValueError("empty odometer window")
    t = np.array([s.t for s in samples], dtype=float)
    if np.any(np.diff(t) < 0):
        raise ValueError("odometer window is not time-sorted")
    v = np.array([s.linear_velocity for s in samples], dtype=float)
    w = np.array([s.angular_velocity for s in samples], dtype=float)
    if len(samples) < 2 or t[-1] <= t[0]:
        raise ValueError("odometer window must span a positive interval")
    theta = -_trapezoid_cum(w, t)
    dx = _trapezoid_cum(v * np.cos(theta), t)[-1]
    dy = -_trapezoid_cum(v * np.sin(theta), t)[-1]
    # sample-noise propagation with trapezoid weights
    h = np.diff(t)
    wts = np.zeros_like(t)
    wts[:-1] += 0.5 * h
    wts[1:] += 0.5 * h
    s2 = float(np.sum(wts ** 2))
    dist = math.hypot(dx, dy)
    var_th = noise.w_sigma ** 2 * s2 + noise.floor ** 2
    var_d = noise.v_sigma ** 2 * s2 + (noise.scale * dist) ** 2 + noise.floor ** 2
    cov = np.diag([var_th, var_d, var_d + dist ** 2 * var_th / 3.0])
    return OdomObservation(yaw=float(theta[-1]), displacement=np.array([dx, dy]),
                           interval=(float(t[0]), float(t[-1])), covariance=cov)


def _odom_pair(a: OdomSample, b: OdomSample, noise: OdomNoise) -> OdomObservation:
    """Two-sample special case of :func:`form_odom_observation` without array overhead."""
    h = b.t - a.t
    th = -0.5 * (a.angular_velocity + b.angular_velocity) * h
    dx = 0.5 * h * (a.linear_velocity + b.linear_velocity * math.cos(th))
    dy = 0.5 * h * (-b.linear_velocity * math.sin(th))
    s2 = 0.5 * h * h
    dist = math.hypot(dx, dy)
    var_th = noise.w_sigma ** 2 * s2 + noise.floor ** 2
    var_d = noise.v_sigma ** 2 * s2 + (noise.scale * dist) ** 2 + noise.floor ** 2
    cov = np.diag([var_th, var_d, var_d + dist ** 2 * var_th / 3.0])
    return OdomObservation(yaw=th, displacement=np.array([dx, dy]), interval=(a.t, b.t), covariance=cov)


def imu_derived_observation(R_prev, p_prev, R, p):
    """Predicted odometer observation from two poses, with Jacobians.

    Returns ``(z, H_cur, H_prev)`` where the Jacobians are with respect to
    ``[d_theta, d_p]`` of the current and previous poses.
    """
    rel = R_prev.T @ R
    yaw = float(yaw_of(rel))
    dp = p - p_prev
    d_body = R_prev.T @ dp
    z = np.array([-yaw, d_body[0], d_body[1]])
    a, b = rel[0, 0], rel[1, 0]
    n = a * a + b * b
    Hc = np.zeros((3, 6))
    Hp = np.zeros((3, 6))
    # exact derivatives of -atan2(rel10, rel00) under right perturbations of either pose
    Hc[0, 1] = (a * rel[1, 2] - b * rel[0, 2]) / n
    Hc[0, 2] = -(a * rel[1, 1] - b * rel[0, 1]) / n
    Hp[0, 0] = -a * rel[2, 0] / n
    Hp[0, 1] = -b * rel[2, 0] / n
    Hp[0, 2] = 1.0
    Hc[1:, 3:6] = R_prev.T[:2]
    Hp[1:, 3:6] = -R_prev.T[:2]
    Hp[1:, 0:3] = _hat3(d_body[0], d_body[1], d_body[2])[:2]
    return z, Hc, Hp


@dataclass
class PoseClone:
    """Pose at the start of the odometer interval and its joint covariance blocks."""

    rotation: np.ndarray
    position: np.ndarray
    cross: np.ndarray = field(default_factory=lambda: np.zeros((15, 6)))  # Cov(x, clone)
    cov: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    @classmethod
    def fixed(cls, rotation, position) -> "PoseClone":
        R = rotation.matrix() if isinstance(rotation, Rotation) else np.asarray(rotation, float)
        return cls(R, np.asarray(position, float))


def _inject(R, p, v, bg, ba, dx):
    return (R @ exp_so3_single(dx[_TH]), p + dx[_P], v + dx[_V], bg + dx[_BG], ba + dx[_BA])


def _kalman(P, H, r, Rm):
    """Joseph-form update of covariance ``P``; returns (dx, P_new)."""
    PHt = P @ H.T
    S = H @ PHt + Rm
    S = 0.5 * (S + S.T)
    try:
        K = np.linalg.solve(S, PHt.T).T
    except np.linalg.LinAlgError:
        log.warning("singular innovation covariance; regularizing")
        K = np.linalg.solve(S + 1e-9 * np.eye(S.shape[0]), PHt.T).T
    A = np.eye(P.shape[0]) - K @ H
    Pn = A @ P @ A.T + K @ Rm @ K.T
    return K @ r, 0.5 * (Pn + Pn.T)


def _innovation(z_obs, z_pred, H, P, Rm):
    r = z_obs - z_pred
    r[0] = (r[0] + math.pi) % (2.0 * math.pi) - math.pi
    S = H @ P @ H.T + Rm
    S = 0.5 * (S + S.T)
    try:
        y = np.linalg.solve(S, r)
    except np.linalg.LinAlgError:
        log.warning("singular innovation covariance; regularizing")
        y = np.linalg.solve(S + 1e-9 * np.eye(3), r)
    return r, float(r @ y)


def gate_innovation(nis: float, stats: InnovationStats, params: AdaptiveGateParams):
    """Windowed test of the current normalized innovation; returns (accepted, new stats).

    E(k) averages ``nis`` with the previous ``M - 1`` stored values. Only
    accepted innovations are stored, so a rejected fault cannot inflate the
    statistic of the updates that follow it.
    """
    st = stats.copy()
    st.e_k = nis
    st.M = adapt_M(nis, params)
    prev = list(st.history)[len(st.history) - (st.M - 1):] if st.M > 1 else []
    st.E_k = float((sum(prev) + nis) / (len(prev) + 1))
    accepted = (not params.enabled) or st.E_k <= params.thr
    if accepted:
        st.history.append(nis)
    return accepted, st


def update(state: FilterState, obs: OdomObservation, stats: InnovationStats,
           clone: PoseClone, params: AdaptiveGateParams = AdaptiveGateParams()):
    """Gated odometer update. Returns ``(state, stats, accepted)``.

    A rejected update returns the input state untouched.
    """
    R = state.rotation.matrix()
    z_pred, Hc, Hp = imu_derived_observation(clone.rotation, clone.position, R, state.position)
    P = np.zeros((21, 21))
    P[:15, :15] = state.covariance
    P[:15, 15:] = clone.cross
    P[15:, :15] = clone.cross.T
    P[15:, 15:] = clone.cov
    H = np.zeros((3, 21))
    H[:, 0:6] = Hc
    H[:, 15:21] = Hp
    r, nis = _innovation(obs.vector(), z_pred, H, P, obs.covariance)
    accepted, st = gate_innovation(nis, stats, params)
    st.last_innovation = r
    if not accepted:
        return state, st, False
    dx, Pn = _kalman(P, H, r, obs.covariance)
    Rn, pn, vn, bgn, ban = _inject(R, state.position, state.velocity, state.gyro_bias, state.accel_bias, dx)
    new = FilterState(state.t, Rotation.from_matrix(Rn), pn, vn, bgn, ban, Pn[:15, :15].copy())
    return new, st, True


# ----------------------------------------------------------------------------
# Running filter with history
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanarConstraint:
    """Soft level-ground pseudo-observation: z at ``height``, zero roll and pitch."""

    height: float = 0.0
    sigma_z: float = 0.01
    sigma_tilt: float = math.radians(0.5)
    enabled: bool = True


class FilterHistory:
    """Snapshots of the running filter, appended at every odometer epoch."""

    def __init__(self, capacity: int = 1024):
        self._n = 0
        self._cap = capacity
        self.t = np.zeros(capacity)
        self.R = np.zeros((capacity, 3, 3))
        self.p = np.zeros((capacity, 3))
        self.v = np.zeros((capacity, 3))
        self.bg = np.zeros((capacity, 3))
        self.ba = np.zeros((capacity, 3))
        self.omega = np.zeros((capacity, 3))
        self.accepted = np.zeros(capacity, dtype=bool)
        self.nis = np.zeros(capacity)
        self.M = np.zeros(capacity, dtype=int)

    def __len__(self) -> int:
        return self._n

    def _grow(self):
        self._cap *= 2
        for name in ("t", "R", "p", "v", "bg", "ba", "omega", "accepted", "nis", "M"):
            a = getattr(self, name)
            b = np.zeros((self._cap,) + a.shape[1:], dtype=a.dtype)
            b[:self._n] = a[:self._n]
            setattr(self, name, b)

    def append(self, t, R, p, v, bg, ba, omega, accepted=True, nis=0.0, M=1):
        if self._n and t < self.t[self._n - 1]:
            raise ValueError("filter history must be appended in time order")
        if self._n == self._cap:
            self._grow()
        i = self._n
        self.t[i], self.R[i], self.p[i], self.v[i] = t, R, p, v
        self.bg[i], self.ba[i], self.omega[i] = bg, ba, omega
        self.accepted[i], self.nis[i], self.M[i] = accepted, nis, M
        self._n += 1

    def view(self, name):
        return getattr(self, name)[:self._n]

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[self._n - 1])

    def _bracket(self, t):
        ts = self.t[:self._n]
        t = np.asarray(t, dtype=float)
        if self._n == 0 or np.any(t < ts[0] - 1e-12) or np.any(t > ts[-1] + 1e-12):
            raise ValueError(f"query time outside filter history [{ts[0] if self._n else None}, "
                             f"{ts[-1] if self._n else None}]")
        i = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, max(self._n - 2, 0))
        j = np.minimum(i + 1, self._n - 1)
        den = ts[j] - ts[i]
        f = np.where(den > 0, (t - ts[i]) / np.where(den > 0, den, 1.0), 0.0)
        f = np.clip(f, 0.0, 1.0)
        return i, j, f

    def interpolate(self, name, t):
        i, j, f = self._bracket(t)
        a = getattr(self, name)
        f = np.asarray(f)[..., None] if a.ndim > 1 else f
        return (1.0 - f) * a[i] + f * a[j]

    def position(self, t):
        return self.interpolate("p", t)

    def velocity(self, t):
        return self.interpolate("v", t)

    def rotation(self, t):
        """Spherical-linear interpolation of the stored orientations."""
        i, j, f = self._bracket(t)
        Ri, Rj = self.R[i], self.R[j]
        d = log_so3(np.swapaxes(Ri, -1, -2) @ Rj)
        return Ri @ exp_so3(np.asarray(f)[..., None] * d)

    def relative(self, t_i, t_j):
        """(R_i, dd_ij) with x_j = x_i + R_i dd_ij."""
        Ri = self.rotation(t_i)
        dp = self.position(t_j) - self.position(t_i)
        return Ri, np.einsum("...ji,...j->...i", Ri, dp)


@dataclass
class MotionPrior:
    position: np.ndarray
    velocity: np.ndarray
    rotation: np.ndarray | None = None
    displacement: np.ndarray | None = None


def motion_prior(history: FilterHistory, t: float, t_ref: float | None = None) -> MotionPrior:
    """Interpolated position/velocity at ``t``; with ``t_ref`` also the relative
    transform (rotation at ``t_ref``, body-frame displacement to ``t``)."""
    out = MotionPrior(history.position(t), history.velocity(t))
    if t_ref is not None:
        out.rotation, out.displacement = history.relative(t_ref, t)
    return out


class ImprovedEKF:
    """Streaming filter: IMU propagation, gated odometer updates, planar pseudo-updates."""

    def __init__(self, state: FilterState, noise: ImuNoise = ImuNoise(), odom_noise: OdomNoise = OdomNoise(),
                 params: AdaptiveGateParams = AdaptiveGateParams(), planar: PlanarConstraint = PlanarConstraint()):
        self.noise, self.odom_noise, self.params, self.planar = noise, odom_noise, params, planar
        self.t = state.t
        self.R = state.rotation.matrix()
        self.p = state.position.copy()
        self.v = state.velocity.copy()
        self.bg = state.gyro_bias.copy()
        self.ba = state.accel_bias.copy()
        self.P = np.zeros((21, 21))
        self.P[:15, :15] = state.covariance
        self.stats = InnovationStats(xi=params.xi)
        self._last_imu = None
        self._last_odom = None
        self._reset_clone()
        self.history = FilterHistory()
        self.n_rejected = 0
        self.n_updates = 0
        self._record(True, 0.0)

    # -- bookkeeping --------------------------------------------------------
    def _reset_clone(self):
        self.cR, self.cp = self.R.copy(), self.p.copy()
        pose = np.r_[0:6]
        self.P[15:, :] = 0.0
        self.P[:, 15:] = 0.0
        self.P[15:, :15] = self.P[pose, :15]
        self.P[:15, 15:] = self.P[:15, pose]
        self.P[15:, 15:] = self.P[np.ix_(pose, pose)]

    def _record(self, accepted, nis):
        w = np.zeros(3) if self._last_imu is None else self._last_imu[1] - self.bg
        self.history.append(self.t, self.R, self.p, self.v, self.bg, self.ba, w, accepted, nis, self.stats.M)

    def state(self) -> FilterState:
        return FilterState(self.t, Rotation.from_matrix(self.R), self.p.copy(), self.v.copy(),
                           self.bg.copy(), self.ba.copy(), self.P[:15, :15].copy())

    # -- propagation --------------------------------------------------------
    def _advance(self, t: float):
        if self._last_imu is None:
            self.t = t
            return
        dt = t - self.t
        if dt <= 0.0:
            return
        if dt > MAX_DT:
            raise ValueError(f"IMU gap of {dt:.3f} s at t={t:.6f}")
        _, gyro, accel = self._last_imu
        self.R, self.p, self.v, F = _strapdown(self.R, self.p, self.v, self.bg, self.ba, gyro, accel, dt)
        P = self.P
        Pxx = F @ P[:15, :15] @ F.T
        Pxx.flat[::16] += _process_noise(self.noise, dt)
        P[:15, :15] = Pxx
        P[:15, 15:] = F @ P[:15, 15:]
        P[15:, :15] = P[:15, 15:].T
        self.t = t

    def add_imu(self, t: float, gyro, accel):
        self._advance(t)
        self._last_imu = (t, np.asarray(gyro, float), np.asarray(accel, float))

    # -- updates ------------------------------------------------------------
    def add_odom(self, sample: OdomSample):
        self._advance(sample.t)
        prev = self._last_odom
        self._last_odom = sample
        if prev is None or sample.t <= prev.t:
            self._reset_clone()
            self._record(True, 0.0)
            return True
        obs = _odom_pair(prev, sample, self.odom_noise)
        z_pred, Hc, Hp = imu_derived_observation(self.cR, self.cp, self.R, self.p)
        H = np.zeros((3, 21))
        H[:, 0:6] = Hc
        H[:, 15:21] = Hp
        r, nis = _innovation(obs.vector(), z_pred, H, self.P, obs.covariance)
        accepted, self.stats = gate_innovation(nis, self.stats, self.params)
        self.n_updates += 1
        if accepted and self.planar.enabled:
            # joint update with the planar pseudo-observation (both linearized at the prior)
            Hpl, rpl, Rpl = self._planar_terms()
            dx, self.P = _kalman(self.P, np.vstack([H, Hpl]), np.r_[r, rpl],
                                 np.block([[obs.covariance, np.zeros((3, 3))], [np.zeros((3, 3)), Rpl]]))
            self.R, self.p, self.v, self.bg, self.ba = _inject(self.R, self.p, self.v, self.bg, self.ba, dx)
        elif accepted:
            dx, self.P = _kalman(self.P, H, r, obs.covariance)
            self.R, self.p, self.v, self.bg, self.ba = _inject(self.R, self.p, self.v, self.bg, self.ba, dx)
        else:
            self.n_rejected += 1
            if self.planar.enabled:
                self._planar_update()
        self._reset_clone()
        self._record(accepted, nis)
        return accepted

    def _planar_terms(self):
        pl = self.planar
        up = self.R[:, 2]
        r = np.array([pl.height - self.p[2], -up[0], -up[1]])
        H = np.zeros((3, 21))
        H[0, 5] = 1.0
        H[1:, 0:3] = -(self.R @ _hat3(0.0, 0.0, 1.0))[:2]
        Rm = np.diag([pl.sigma_z ** 2, pl.sigma_tilt ** 2, pl.sigma_tilt ** 2])
        return H, r, Rm

    def _planar_update(self):
        H, r, Rm = self._planar_terms()
        dx, self.P = _kalman(self.P, H, r, Rm)
        self.R, self.p, self.v, self.bg, self.ba = _inject(self.R, self.p, self.v, self.bg, self.ba, dx)


def run_filter(streams, initial: FilterState, noise: ImuNoise = ImuNoise(), odom_noise: OdomNoise = OdomNoise(),
               params: AdaptiveGateParams = AdaptiveGateParams(),
               planar: PlanarConstraint = PlanarConstraint()) -> ImprovedEKF:
    """Run the filter over all IMU and odometer samples of ``streams`` in time order."""
    ekf = ImprovedEKF(initial, noise, odom_noise, params, planar)
    ti, to = streams.imu_t, streams.odom_t
    i = j = 0
    ni, no = ti.size, to.size
    gyro, accel = streams.gyro, streams.accel
    ov, ow = streams.odom_v, streams.odom_w
    while i < ni or j < no:
        if j >= no or (i < ni and ti[i] <= to[j]):
            if ti[i] >= initial.t:
                ekf.add_imu(float(ti[i]), gyro[i], accel[i])
            i += 1
        else:
            if to[j] >= initial.t and ekf._last_imu is not None:
                ekf.add_odom(OdomSample(float(to[j]), float(ov[j]), float(ow[j])))
            j += 1
    return ekf
