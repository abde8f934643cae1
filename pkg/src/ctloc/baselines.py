"""Reference estimators: odometer dead reckoning and a discrete planar EKF with range updates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .preprocessing import AnchorMap, SensorStreams


@dataclass
class TimedPoses:
    """Planar poses ``(x, y, yaw)`` at times ``t``."""

    t: np.ndarray
    pose: np.ndarray

    def sample(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.column_stack([np.interp(t, self.t, self.pose[:, k]) for k in range(2)])
        yaw = np.interp(t, self.t, np.unwrap(self.pose[:, 2]))
        return np.column_stack([out, yaw])


def dead_reckoning(streams: SensorStreams, x0, t0: float | None = None) -> TimedPoses:
    """Midpoint integration of odometer twists from pose ``x0 = (x, y, yaw)``."""
    t = streams.odom_t
    sel = t >= (t0 if t0 is not None else t[0])
    t, v, w = t[sel], streams.odom_v[sel], streams.odom_w[sel]
    if t.size == 0:
        raise ValueError("no odometer samples")
    dt = np.diff(t)
    vm = 0.5 * (v[:-1] + v[1:])
    wm = 0.5 * (w[:-1] + w[1:])
    yaw = x0[2] + np.r_[0.0, np.cumsum(wm * dt)]
    ymid = yaw[:-1] + 0.5 * wm * dt
    x = x0[0] + np.r_[0.0, np.cumsum(vm * np.cos(ymid) * dt)]
    y = x0[1] + np.r_[0.0, np.cumsum(vm * np.sin(ymid) * dt)]
    return TimedPoses(t.copy(), np.column_stack([x, y, yaw]))


@dataclass(frozen=True)
class DiscreteEkfConfig:
    v_sigma: float = 0.01  # per odometer sample, m/s
    w_sigma: float = 0.02  # per odometer sample, rad/s
    scale: float = 0.005
    range_sigma: float = 0.0514
    range_bias: float = 0.0  # subtracted from every range
    height: float = 0.0
    nis_gate: float = 6.63  # chi-square, 1 dof, 99 %
    init_sigma: tuple = (0.05, 0.05, math.radians(2.0))


def discrete_ekf(streams: SensorStreams, anchors: AnchorMap, x0, t0: float | None = None,
                 config: DiscreteEkfConfig = DiscreteEkfConfig()) -> TimedPoses:
    """Odometer-driven (x, y, yaw) EKF with NIS-gated range updates, output at odometer times."""
    ot, ov, ow = streams.odom_t, streams.odom_v, streams.odom_w
    t_start = ot[0] if t0 is None else t0
    i = int(np.searchsorted(ot, t_start))
    ut = streams.uwb_t
    j = int(np.searchsorted(ut, t_start))
    x = np.array(x0, dtype=float)
    P = np.diag(np.asarray(config.init_sigma, dtype=float) ** 2)
    out_t, out_x = [ot[i]], [x.copy()]
    t_cur = ot[i]
    zh = config.height
    for k in range(i + 1, ot.size):
        # ranges up to this odometer sample use the state propagated to their time
        while j < ut.size and ut[j] <= ot[k]:
            tau = ut[j] - t_cur
            if tau > 0:
                x, P = _propagate(x, P, ov[k - 1], ow[k - 1], tau, config)
                t_cur = ut[j]
            aid = str(streams.uwb_anchor[j])
            if aid in anchors:
                a = anchors[aid]
                d = np.array([x[0] - a[0], x[1] - a[1], zh - a[2]])
                rho = float(np.linalg.norm(d))
                H = np.array([d[0] / rho, d[1] / rho, 0.0])
                innov = streams.uwb_range[j] - config.range_bias - rho
                S = H @ P @ H + config.range_sigma ** 2
                if innov * innov / S <= config.nis_gate:
                    K = P @ H / S
                    x = x + K * innov
                    P = (np.eye(3) - np.outer(K, H)) @ P
                    P = 0.5 * (P + P.T)
            j += 1
        tau = ot[k] - t_cur
        if tau > 0:
            x, P = _propagate(x, P, 0.5 * (ov[k - 1] + ov[k]), 0.5 * (ow[k - 1] + ow[k]), tau, config)
        t_cur = ot[k]
        out_t.append(ot[k])
        out_x.append(x.copy())
    return TimedPoses(np.array(out_t), np.array(out_x))


def _propagate(x, P, v, w, dt, cfg: DiscreteEkfConfig):
    ym = x[2] + 0.5 * w * dt
    c, s = math.cos(ym), math.sin(ym)
    xn = np.array([x[0] + v * c * dt, x[1] + v * s * dt, x[2] + w * dt])
    F = np.array([[1.0, 0.0, -v * s * dt], [0.0, 1.0, v * c * dt], [0.0, 0.0, 1.0]])
    G = np.array([[c * dt, 0.0], [s * dt, 0.0], [0.0, dt]])
    # per-sample twist noise held over the step, plus the scale allowance
    Q = G @ np.diag([cfg.v_sigma ** 2 + (cfg.scale * v) ** 2, cfg.w_sigma ** 2]) @ G.T
    return xn, F @ P @ F.T + Q
