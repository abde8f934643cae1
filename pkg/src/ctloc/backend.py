"""Sliding-window optimization of a planar continuous-time trajectory.

The trajectory is a cubic B-spline over control points ``(x, y, yaw)`` at a
fixed tag height. Because every control rotation is a rotation about z, the
cumulative SO(3) spline reduces to ``Rz(sum_k W_k yaw_k)``, so position, velocity
and heading at any time are linear in the control points; the residuals are
not.

Residuals: anchor and virtual-anchor ranges (robust), IMU and odometer
preintegrated blocks between ranging epochs, an initial-pose prior, and the
marginalization prior carried between windows. Only the trailing ``n_active``
control points are variables; earlier ones are frozen.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .ekf import G_W, ImuNoise, OdomNoise
from .geometry import exp_so3, exp_so3_single, hat, log_so3, right_jacobian_inv, rot_z
from .spline import KnotVector, TrajectorySpline

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# Preintegration
# ----------------------------------------------------------------------------

@dataclass
class ImuPreintegration:
    """IMU deltas over ``[t_a, t_b]`` in the body frame at ``t_a``; cov order (rot, vel, pos)."""

    t_a: float
    t_b: float
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    cov: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    n_samples: int

    @property
    def dt(self) -> float:
        return self.t_b - self.t_a


@dataclass
class OdomPreintegration:
    """Wheel odometry over ``[t_a, t_b]``: heading change (CCW) and body-frame displacement at ``t_a``."""

    t_a: float
    t_b: float
    dyaw: float
    dd: np.ndarray
    cov: np.ndarray
    n_samples: int


def _block_nodes(ts, bounds):
    """Per block: node times (boundaries plus raw samples strictly inside)."""
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        i0 = np.searchsorted(ts, a, side="right")
        i1 = np.searchsorted(ts, b, side="left")
        out.append(np.concatenate([[a], ts[i0:i1], [b]]))
    return out


def _check_cover(ts, bounds, name, slack=0.0):
    if ts.size < 2:
        raise ValueError(f"{name} block needs at least 2 samples")
    if bounds[0] < ts[0] - slack - 1e-9 or bounds[-1] > ts[-1] + slack + 1e-9:
        raise ValueError(f"{name} samples do not cover [{bounds[0]}, {bounds[-1]}]")
    if np.any(np.diff(bounds) <= 0):
        raise ValueError(f"{name} block boundaries must strictly increase")


def _padded(nodes, values_fn):
    """Stack per-block node arrays into padded (m, L) step arrays; zero-length padding steps."""
    m = len(nodes)
    L = max(len(n) for n in nodes) - 1
    dt = np.zeros((m, L))
    allt = np.concatenate(nodes)
    vals = values_fn(allt)
    mids = np.zeros((m, L) + vals.shape[1:])
    off = 0
    for j, n in enumerate(nodes):
        k = len(n) - 1
        dt[j, :k] = np.diff(n)
        v = vals[off:off + k + 1]
        mids[j, :k] = 0.5 * (v[:-1] + v[1:])
        off += k + 1
    return dt, mids


def preintegrate_imu_blocks(imu_t, gyro, accel, bounds, gyro_bias=None, accel_bias=None,
                            noise: ImuNoise = ImuNoise(), slack: float = 0.0) -> list[ImuPreintegration]:
    """Midpoint-rule preintegration for consecutive blocks, vectorized across blocks.

    IMU readings are linearly interpolated at block boundaries and held
    constant up to ``slack`` seconds past the first or last sample.
    """
    imu_t = np.asarray(imu_t, dtype=float)
    bounds = np.asarray(bounds, dtype=float)
    _check_cover(imu_t, bounds, "IMU", slack)
    m = bounds.size - 1
    bg = np.zeros((m, 3)) if gyro_bias is None else np.broadcast_to(np.asarray(gyro_bias, float), (m, 3))
    ba = np.zeros((m, 3)) if accel_bias is None else np.broadcast_to(np.asarray(accel_bias, float), (m, 3))
    nodes = _block_nodes(imu_t, bounds)

    def interp(t):
        g = np.stack([np.interp(t, imu_t, gyro[:, k]) for k in range(3)], axis=-1)
        a = np.stack([np.interp(t, imu_t, accel[:, k]) for k in range(3)], axis=-1)
        return np.concatenate([g, a], axis=-1)

    dt, mid = _padded(nodes, interp)
    w = mid[..., :3] - bg[:, None, :]
    a = mid[..., 3:] - ba[:, None, :]
    dR = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    dv = np.zeros((m, 3))
    dp = np.zeros((m, 3))
    cov = np.zeros((m, 9, 9))
    qg, qa = noise.gyro ** 2, noise.accel ** 2
    phi = w * dt[..., None]
    steps = exp_so3(phi)
    halves = exp_so3(0.5 * phi)
    Ahat = hat(a)
    A = np.zeros((m, 9, 9))
    A[:, 3:6, 3:6] = np.eye(3)
    A[:, 6:9, 6:9] = np.eye(3)
    diag = np.arange(9)
    for k in range(dt.shape[1]):
        h = dt[:, k]
        h2 = h * h
        step = steps[:, k]
        acc = np.einsum("mij,mj->mi", dR @ halves[:, k], a[:, k])
        # first-order covariance propagation, noise densities as continuous white noise
        RA = dR @ Ahat[:, k]
        A[:, 0:3, 0:3] = np.swapaxes(step, -1, -2)
        A[:, 3:6, 0:3] = -RA * h[:, None, None]
        A[:, 6:9, 0:3] = -0.5 * RA * h2[:, None, None]
        A[:, 6:9, 3:6] = np.eye(3) * h[:, None, None]
        cov = A @ cov @ np.swapaxes(A, -1, -2)
        cov[:, diag[:3], diag[:3]] += qg * h[:, None]
        cov[:, diag[3:6], diag[3:6]] += qa * h[:, None]
        cov[:, diag[6:], diag[6:]] += qa * (h2 * h)[:, None] / 3.0
        dp = dp + dv * h[:, None] + 0.5 * acc * h2[:, None]
        dv = dv + acc * h[:, None]
        dR = dR @ step
    out = []
    for j in range(m):
        out.append(ImuPreintegration(float(bounds[j]), float(bounds[j + 1]), dR[j], dv[j], dp[j],
                                     0.5 * (cov[j] + cov[j].T), bg[j].copy(), ba[j].copy(), len(nodes[j])))
    return out


def preintegrate_imu(imu_t, gyro, accel, t_a, t_b, gyro_bias=None, accel_bias=None,
                     noise: ImuNoise = ImuNoise()) -> ImuPreintegration:
    return preintegrate_imu_blocks(imu_t, gyro, accel, [t_a, t_b], gyro_bias, accel_bias, noise)[0]


def preintegrate_odom_blocks(odom_t, v, w, bounds, noise: OdomNoise = OdomNoise(),
                             slack: float = 0.0) -> list[OdomPreintegration]:
    """Midpoint-rule integration of wheel twists per block (heading CCW positive)."""
    odom_t = np.asarray(odom_t, dtype=float)
    bounds = np.asarray(bounds, dtype=float)
    _check_cover(odom_t, bounds, "odometer", slack)
    nodes = _block_nodes(odom_t, bounds)

    def interp(t):
        return np.column_stack([np.interp(t, odom_t, v), np.interp(t, odom_t, w)])

    dt, mid = _padded(nodes, interp)
    vm, wm = mid[..., 0], mid[..., 1]
    dpsi = wm * dt
    psi_end = np.cumsum(dpsi, axis=1)
    psi_mid = psi_end - 0.5 * dpsi
    dx = np.sum(vm * np.cos(psi_mid) * dt, axis=1)
    dy = np.sum(vm * np.sin(psi_mid) * dt, axis=1)
    out = []
    for j, n in enumerate(nodes):
        h = np.diff(n)
        wts = np.zeros(n.size)
        wts[:-1] += 0.5 * h
        wts[1:] += 0.5 * h
        s2 = float(np.sum(wts ** 2))
        dist = math.hypot(dx[j], dy[j])
        var_psi = noise.w_sigma ** 2 * s2 + noise.floor ** 2
        var_d = noise.v_sigma ** 2 * s2 + (noise.scale * dist) ** 2 + noise.floor ** 2
        cov = np.diag([var_psi, var_d, var_d + dist ** 2 * var_psi / 3.0])
        out.append(OdomPreintegration(float(n[0]), float(n[-1]), float(psi_end[j, -1]),
                                      np.array([dx[j], dy[j]]), cov, n.size))
    return out


def preintegrate_odom(odom_t, v, w, t_a, t_b, noise: OdomNoise = OdomNoise()) -> OdomPreintegration:
    return preintegrate_odom_blocks(odom_t, v, w, [t_a, t_b], noise)[0]


# ----------------------------------------------------------------------------
# Residuals on full 3D states
# ----------------------------------------------------------------------------

def imu_residual_from_states(Ra, pa, va, Rb, pb, vb, pre: ImuPreintegration):
    """r = [Log(dR^T Ra^T Rb), Ra^T(vb - va + g dt) - dv, Ra^T(pb - pa - va dt + g dt^2/2) - dp]."""
    dt = pre.dt
    rR = log_so3(pre.dR.T @ Ra.T @ Rb)
    rv = Ra.T @ (vb - va + G_W * dt) - pre.dv
    rp = Ra.T @ (pb - pa - va * dt + 0.5 * G_W * dt * dt) - pre.dp
    return np.concatenate([rR, rv, rp])


def imu_residual_jacobians(Ra, pa, va, Rb, pb, vb, pre: ImuPreintegration) -> dict:
    """Blocks (9, 3) w.r.t. right rotation perturbations and additive p, v."""
    dt = pre.dt
    r = imu_residual_from_states(Ra, pa, va, Rb, pb, vb, pre)
    Jri = right_jacobian_inv(r[:3])
    J = {k: np.zeros((9, 3)) for k in ("theta_a", "p_a", "v_a", "theta_b", "p_b", "v_b")}
    J["theta_a"][0:3] = -Jri @ Rb.T @ Ra
    J["theta_b"][0:3] = Jri
    J["theta_a"][3:6] = hat(Ra.T @ (vb - va + G_W * dt))
    J["v_a"][3:6] = -Ra.T
    J["v_b"][3:6] = Ra.T
    J["theta_a"][6:9] = hat(Ra.T @ (pb - pa - va * dt + 0.5 * G_W * dt * dt))
    J["p_a"][6:9] = -Ra.T
    J["p_b"][6:9] = Ra.T
    J["v_a"][6:9] = -Ra.T * dt
    return J


def odom_residual_from_states(Ra, pa, Rb, pb, pre: OdomPreintegration):
    """r = [Log(Rz(dyaw)^T Ra^T Rb), Ra^T(pb - pa) - (dd, 0)]."""
    rR = log_so3(rot_z(pre.dyaw).T @ Ra.T @ Rb)
    rd = Ra.T @ (pb - pa) - np.array([pre.dd[0], pre.dd[1], 0.0])
    return np.concatenate([rR, rd])


def odom_residual_jacobians(Ra, pa, Rb, pb, pre: OdomPreintegration) -> dict:
    r = odom_residual_from_states(Ra, pa, Rb, pb, pre)
    Jri = right_jacobian_inv(r[:3])
    J = {k: np.zeros((6, 3)) for k in ("theta_a", "p_a", "theta_b", "p_b")}
    J["theta_a"][0:3] = -Jri @ Rb.T @ Ra
    J["theta_b"][0:3] = Jri
    J["theta_a"][3:6] = hat(Ra.T @ (pb - pa))
    J["p_a"][3:6] = -Ra.T
    J["p_b"][3:6] = Ra.T
    return J


def _spline_states(spline: TrajectorySpline, t):
    return spline.orientation(t), spline.position(t), spline.position(t, 1)


def imu_factor_residual(spline: TrajectorySpline, pre: ImuPreintegration) -> np.ndarray:
    """IMU block residual against the spline states at the block ends."""
    Ra, pa, va = _spline_states(spline, pre.t_a)
    Rb, pb, vb = _spline_states(spline, pre.t_b)
    return imu_residual_from_states(Ra, pa, va, Rb, pb, vb, pre)


def odom_factor_residual(spline: TrajectorySpline, pre: OdomPreintegration) -> np.ndarray:
    Ra, pa, _ = _spline_states(spline, pre.t_a)
    Rb, pb, _ = _spline_states(spline, pre.t_b)
    return odom_residual_from_states(Ra, pa, Rb, pb, pre)


def predicted_imu(spline: TrajectorySpline, t):
    """Body-frame gyro and specific force implied by the spline: ``(omega, R^T (p'' + g))``."""
    R = spline.orientation(t)
    acc = spline.position(t, 2) + G_W
    return spline.angular_velocity(t), np.einsum("...ji,...j->...i", R, acc)


def predicted_odometry(spline: TrajectorySpline, t):
    """Forward speed and yaw rate implied by the spline: ``((R^T p')_x, omega_z)``."""
    R = spline.orientation(t)
    v = np.einsum("...ji,...j->...i", R, spline.position(t, 1))
    return v[..., 0], spline.angular_velocity(t)[..., 2]


def va_range_residual(x, positions, ranges, summed: bool = True):
    """Per-VA ``r_m - |x - p_m|``; ``summed`` adds them into one scalar."""
    x = np.asarray(x, dtype=float)
    P = np.atleast_2d(np.asarray(positions, dtype=float))
    if P.shape[0] == 0:
        raise ValueError("empty VA set")
    e = np.asarray(ranges, dtype=float) - np.linalg.norm(x[None, :] - P, axis=1)
    return float(np.sum(e)) if summed else e


def va_factor_residual(spline: TrajectorySpline, t: float, positions, ranges, summed: bool = True):
    return va_range_residual(spline.position(t), positions, ranges, summed)


# ----------------------------------------------------------------------------
# Window policy
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowPolicy:
    L_min: int = 5
    L_max: int = 30
    lambda0: float = 0.02
    lambda1: float = 0.1
    beta: float = 1.0
    delta_T: float = 10.0

    def __post_init__(self):
        if not self.L_min < self.L_max:
            raise ValueError("L_min must be below L_max")
        if not self.lambda0 < self.lambda1:
            raise ValueError("lambda0 must be below lambda1")
        if self.delta_T <= 0 or self.beta <= 0:
            raise ValueError("delta_T and beta must be positive")


def window_length(alpha_cp: float, policy: WindowPolicy = WindowPolicy()) -> int:
    """Active control-point count from control-point density (points per second)."""
    if alpha_cp >= policy.lambda1:
        return policy.L_min
    if alpha_cp <= policy.lambda0:
        return policy.L_max
    L = math.floor(policy.beta * (policy.L_max - policy.L_min) * (policy.lambda1 - alpha_cp)
                   / (policy.lambda1 - policy.lambda0))
    return int(min(max(L, policy.L_min), policy.L_max))


def control_point_density(breakpoints, t_end: float, delta_T: float) -> float:
    b = np.asarray(breakpoints, dtype=float)
    return float(np.count_nonzero((b > t_end - delta_T) & (b <= t_end))) / delta_T


# ----------------------------------------------------------------------------
# Factor storage
# ----------------------------------------------------------------------------

class _Columns:
    """Append-only columnar storage."""

    def __init__(self, **shapes):
        self._shapes = shapes
        self._chunks = {k: [] for k in shapes}
        self._cache = None

    def append(self, **cols):
        n = None
        for k, shape in self._shapes.items():
            a = np.asarray(cols[k], dtype=float).reshape((-1,) + shape)
            if n is None:
                n = a.shape[0]
            elif a.shape[0] != n:
                raise ValueError("column lengths differ")
            self._chunks[k].append(a)
        self._cache = None

    def columns(self) -> dict:
        if self._cache is None:
            self._cache = {k: (np.concatenate(v) if v else np.zeros((0,) + self._shapes[k]))
                           for k, v in self._chunks.items()}
            self._chunks = {k: [v] for k, v in self._cache.items()}
        return self._cache

    def __len__(self) -> int:
        return sum(c.shape[0] for c in self._chunks[next(iter(self._shapes))]) if self._shapes else 0


def _sqrt_info(cov: np.ndarray) -> np.ndarray:
    """Batched inverse Cholesky factors: L^-1 with cov = L L^T."""
    L = np.linalg.cholesky(cov)
    n = cov.shape[-1]
    return np.linalg.solve(L, np.broadcast_to(np.eye(n), cov.shape))


@dataclass
class FactorStore:
    """All measurements turned into residual blocks so far."""

    ranges: _Columns = field(default_factory=lambda: _Columns(t=(), anchor=(3,), r=(), sigma=()))
    vas: _Columns = field(default_factory=lambda: _Columns(t=(), anchor=(3,), r=(), sigma=()))
    imu: _Columns = field(default_factory=lambda: _Columns(t_a=(), t_b=(), dpsi=(), dv=(2,), dp=(2,),
                                                            W=(5, 5)))
    odom: _Columns = field(default_factory=lambda: _Columns(t_a=(), t_b=(), dpsi=(), dd=(2,), W=(3, 3)))
    pose_priors: _Columns = field(default_factory=lambda: _Columns(t=(), x=(3,), W=(3, 3)))
    cp_priors: _Columns = field(default_factory=lambda: _Columns(idx=(), x=(3,), inv_sigma=(3,)))

    def add_ranges(self, t, anchor, r, sigma):
        if len(np.atleast_1d(t)):
            self.ranges.append(t=t, anchor=anchor, r=r, sigma=sigma)

    def add_vas(self, t, anchor, r, sigma):
        if len(np.atleast_1d(t)):
            self.vas.append(t=t, anchor=anchor, r=r, sigma=sigma)

    def add_imu_blocks(self, blocks: list[ImuPreintegration], floor=(0.0, 0.0, 0.0)):
        """Planar part of IMU blocks: (yaw, dv_xy, dp_xy) with the marginal covariance plus model floors."""
        if not blocks:
            return
        idx = [2, 3, 4, 6, 7]
        C = np.stack([b.cov[np.ix_(idx, idx)] for b in blocks])
        fr, fv, fp = floor
        C = C + np.diag([fr ** 2, fv ** 2, fv ** 2, fp ** 2, fp ** 2])
        self.imu.append(t_a=[b.t_a for b in blocks], t_b=[b.t_b for b in blocks],
                        dpsi=[math.atan2(b.dR[1, 0], b.dR[0, 0]) for b in blocks],
                        dv=[b.dv[:2] for b in blocks], dp=[b.dp[:2] for b in blocks], W=_sqrt_info(C))

    def add_odom_blocks(self, blocks: list[OdomPreintegration], floor=(0.0, 0.0)):
        if not blocks:
            return
        fr, fd = floor
        C = np.stack([b.cov for b in blocks]) + np.diag([fr ** 2, fd ** 2, fd ** 2])
        self.odom.append(t_a=[b.t_a for b in blocks], t_b=[b.t_b for b in blocks],
                         dpsi=[b.dyaw for b in blocks], dd=[b.dd for b in blocks], W=_sqrt_info(C))

    def add_cp_priors(self, first_index: int, X, sigma):
        """Weak priors pinning control points ``first_index..`` near their initial values."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        if n:
            inv = np.broadcast_to(1.0 / np.asarray(sigma, dtype=float), (n, 3))
            self.cp_priors.append(idx=np.arange(first_index, first_index + n), x=X, inv_sigma=inv)

    def add_pose_prior(self, t, x, sigma):
        self.pose_priors.append(t=[t], x=[x], W=[np.diag(1.0 / np.asarray(sigma, dtype=float))])


# ----------------------------------------------------------------------------
# Window, solver, marginalization
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LMSettings:
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    rel_tol: float = 1e-6
    grad_tol: float = 1e-8
    max_iter: int = 50
    lambda_max: float = 1e12


@dataclass
class LMReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    costs: list = field(default_factory=list)  # accepted costs, starting with the initial one
    n_rejected: int = 0
    reason: str = ""
    rank_deficient: bool = False
    n_active: int = 0
    n_residuals: int = 0
    seconds: float = 0.0


@dataclass
class MarginalPrior:
    """Linearized prior ``r = S (x - x0) + e0`` over control points ``indices`` (x, y, yaw each)."""

    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    x0: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    S: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    e0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def is_identity(self) -> bool:
        return self.S.shape[0] == 0

    def information(self) -> np.ndarray:
        return self.S.T @ self.S


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _rot2T(psi):
    """Stack of 2x2 R(psi)^T."""
    c, s = np.cos(psi), np.sin(psi)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)


class _Eval:
    """Segment/weight cache for a set of evaluation times."""

    __slots__ = ("s", "W0", "W1")

    def __init__(self, knots: KnotVector, t, vel: bool = False):
        t = np.asarray(t, dtype=float)
        if t.size:
            self.s, self.W0 = knots.weights(t, 0)
            self.W1 = knots.weights(t, 1)[1] if vel else None
        else:
            self.s, self.W0, self.W1 = np.zeros(0, dtype=int), np.zeros((0, 4)), np.zeros((0, 4))

    def value(self, X, W):
        return np.einsum("nk,nkc->nc", W, X[self.s[:, None] + np.arange(4)])


@dataclass(frozen=True)
class WindowConfig:
    height: float = 0.3
    huber: bool = True
    huber_k: float = 3.0  # in units of sigma
    summed_va: bool = False
    keep_straddling: bool = True
    L_w: int = 4


class FactorGraphWindow:
    """Residuals touching the active control points ``first..N-1``; earlier ones are frozen."""

    def __init__(self, X: np.ndarray, knots: KnotVector, store: FactorStore, first: int,
                 config: WindowConfig = WindowConfig(), prior: MarginalPrior | None = None):
        self.X = X  # (N, 3) shared with the estimator; only rows >= first are written
        self.knots = knots
        self.store = store
        self.first = int(first)
        self.config = config
        self.prior = prior if prior is not None else MarginalPrior()
        if not 0 <= self.first < X.shape[0]:
            raise ValueError("window needs at least one active control point")
        self._select()

    @property
    def n_active(self) -> int:
        return self.X.shape[0] - self.first

    # -- selection -----------------------------------------------------------
    def _thresholds(self):
        """Factor times touching an active control point satisfy ``t >= K[first]``;
        residuals entirely inside active segments also have ``t_start >= K[first + 3]``."""
        k = self.knots.knots
        lo = k[self.first]
        lo_strict = k[min(self.first + 3, k.size - 1)]
        return lo, (-np.inf if self.config.keep_straddling else lo_strict)

    def _select(self):
        K = self.knots
        st = self.store
        lo, lo_start = self._thresholds()
        self.sel = {}
        for name in ("ranges", "vas", "pose_priors"):
            c = getattr(st, name).columns()
            idx = np.flatnonzero((c["t"] >= lo) & (c["t"] >= lo_start))
            self.sel[name] = (idx, _Eval(K, c["t"][idx]))
        c = st.cp_priors.columns()
        self.sel["cp_priors"] = (np.flatnonzero(c["idx"] >= self.first),)
        for name in ("imu", "odom"):
            c = getattr(st, name).columns()
            idx = np.flatnonzero((c["t_b"] >= lo) & (c["t_a"] >= lo_start))
            self.sel[name] = (idx, _Eval(K, c["t_a"][idx], vel=True), _Eval(K, c["t_b"][idx], vel=True))

    def n_factors(self) -> int:
        return sum(len(v[0]) for v in self.sel.values()) + (1 if not self.prior.is_identity else 0)

    # -- residuals -------------------------------------------------------------
    def _range_terms(self, X, name, want_J):
        idx, ev = self.sel[name]
        if idx.size == 0:
            return None
        c = getattr(self.store, name).columns()
        A, r, sig = c["anchor"][idx], c["r"][idx], c["sigma"][idx]
        p = ev.value(X, ev.W0)
        d = np.column_stack([p[:, 0] - A[:, 0], p[:, 1] - A[:, 1], np.full(idx.size, self.config.height) - A[:, 2]])
        rho = np.linalg.norm(d, axis=1)
        e = (r - rho) / sig
        w = np.ones_like(e)
        if self.config.huber:
            k = self.config.huber_k
            big = np.abs(e) > k
            w[big] = np.sqrt(k / np.abs(e[big]))
        terms = {"e": e, "w": w, "robust": True}
        if want_J:
            D = -(d[:, :2] / np.maximum(rho, 1e-12)[:, None]) / sig[:, None]  # de/dp_xy
            terms["blocks"] = [(ev, ev.W0, D[:, None, :], (0, 1))]
        return terms

    def _imu_terms(self, X, want_J):
        idx, ea, eb = self.sel["imu"]
        if idx.size == 0:
            return None
        c = self.store.imu.columns()
        ta, tb = c["t_a"][idx], c["t_b"][idx]
        dt = tb - ta
        xa, xb = ea.value(X, ea.W0), eb.value(X, eb.W0)
        va, vb = ea.value(X, ea.W1)[:, :2], eb.value(X, eb.W1)[:, :2]
        RT = _rot2T(xa[:, 2])
        wv = vb - va
        wp = xb[:, :2] - xa[:, :2] - va * dt[:, None]
        raw = np.zeros((idx.size, 5))
        raw[:, 0] = _wrap(xb[:, 2] - xa[:, 2] - c["dpsi"][idx])
        raw[:, 1:3] = np.einsum("nij,nj->ni", RT, wv) - c["dv"][idx]
        raw[:, 3:5] = np.einsum("nij,nj->ni", RT, wp) - c["dp"][idx]
        Wi = c["W"][idx]
        e = np.einsum("nij,nj->ni", Wi, raw)
        terms = {"e": e.reshape(-1), "w": np.ones(e.size), "robust": False}
        if want_J:
            n = idx.size
            Rv, Rp = np.einsum("nij,nj->ni", RT, wv), np.einsum("nij,nj->ni", RT, wp)
            # d raw / d (state at a): position xy, velocity xy, yaw
            Ja_pos = np.zeros((n, 5, 2))
            Ja_pos[:, 3:5] = -RT
            Ja_vel = np.zeros((n, 5, 2))
            Ja_vel[:, 1:3] = -RT
            Ja_vel[:, 3:5] = -RT * dt[:, None, None]
            Ja_yaw = np.zeros((n, 5, 1))
            Ja_yaw[:, 0, 0] = -1.0
            Ja_yaw[:, 1:3, 0] = np.column_stack([Rv[:, 1], -Rv[:, 0]])
            Ja_yaw[:, 3:5, 0] = np.column_stack([Rp[:, 1], -Rp[:, 0]])
            Jb_pos = np.zeros((n, 5, 2))
            Jb_pos[:, 3:5] = RT
            Jb_vel = np.zeros((n, 5, 2))
            Jb_vel[:, 1:3] = RT
            Jb_yaw = np.zeros((n, 5, 1))
            Jb_yaw[:, 0, 0] = 1.0
            wj = lambda M: Wi @ M  # noqa: E731
            terms["blocks"] = [
                (ea, ea.W0, wj(Ja_pos), (0, 1)), (ea, ea.W1, wj(Ja_vel), (0, 1)), (ea, ea.W0, wj(Ja_yaw), (2,)),
                (eb, eb.W0, wj(Jb_pos), (0, 1)), (eb, eb.W1, wj(Jb_vel), (0, 1)), (eb, eb.W0, wj(Jb_yaw), (2,)),
            ]
            terms["rows"] = 5
        return terms

    def _odom_terms(self, X, want_J):
        idx, ea, eb = self.sel["odom"]
        if idx.size == 0:
            return None
        c = self.store.odom.columns()
        xa, xb = ea.value(X, ea.W0), eb.value(X, eb.W0)
        RT = _rot2T(xa[:, 2])
        wd = xb[:, :2] - xa[:, :2]
        raw = np.zeros((idx.size, 3))
        raw[:, 0] = _wrap(xb[:, 2] - xa[:, 2] - c["dpsi"][idx])
        Rd = np.einsum("nij,nj->ni", RT, wd)
        raw[:, 1:3] = Rd - c["dd"][idx]
        Wi = c["W"][idx]
        e = np.einsum("nij,nj->ni", Wi, raw)
        terms = {"e": e.reshape(-1), "w": np.ones(e.size), "robust": False}
        if want_J:
            n = idx.size
            Ja_pos = np.zeros((n, 3, 2))
            Ja_pos[:, 1:3] = -RT
            Ja_yaw = np.zeros((n, 3, 1))
            Ja_yaw[:, 0, 0] = -1.0
            Ja_yaw[:, 1:3, 0] = np.column_stack([Rd[:, 1], -Rd[:, 0]])
            Jb_pos = np.zeros((n, 3, 2))
            Jb_pos[:, 1:3] = RT
            Jb_yaw = np.zeros((n, 3, 1))
            Jb_yaw[:, 0, 0] = 1.0
            terms["blocks"] = [(ea, ea.W0, Wi @ Ja_pos, (0, 1)), (ea, ea.W0, Wi @ Ja_yaw, (2,)),
                               (eb, eb.W0, Wi @ Jb_pos, (0, 1)), (eb, eb.W0, Wi @ Jb_yaw, (2,))]
            terms["rows"] = 3
        return terms

    def _pose_prior_terms(self, X, want_J):
        idx, ev = self.sel["pose_priors"]
        if idx.size == 0:
            return None
        c = self.store.pose_priors.columns()
        x = ev.value(X, ev.W0)
        raw = x - c["x"][idx]
        raw[:, 2] = _wrap(raw[:, 2])
        Wi = c["W"][idx]
        e = np.einsum("nij,nj->ni", Wi, raw)
        terms = {"e": e.reshape(-1), "w": np.ones(e.size), "robust": False}
        if want_J:
            terms["blocks"] = [(ev, ev.W0, Wi, (0, 1, 2))]
            terms["rows"] = 3
        return terms

    def _cp_prior_terms(self, X, want_J):
        (idx,) = self.sel["cp_priors"]
        if idx.size == 0:
            return None
        c = self.store.cp_priors.columns()
        cp = c["idx"][idx].astype(int)
        raw = X[cp] - c["x"][idx]
        raw[:, 2] = _wrap(raw[:, 2])
        e = (raw * c["inv_sigma"][idx]).reshape(-1)
        terms = {"e": e, "w": np.ones(e.size), "robust": False}
        if want_J:
            terms["diag"] = (3 * (cp - self.first)[:, None] + np.arange(3)[None, :], c["inv_sigma"][idx])
        return terms

    def _prior_terms(self, X, want_J):
        pr = self.prior
        if pr.is_identity:
            return None
        dx = X[pr.indices] - pr.x0
        dx[:, 2] = _wrap(dx[:, 2])
        e = pr.S @ dx.reshape(-1) + pr.e0
        terms = {"e": e, "w": np.ones(e.size), "robust": False}
        if want_J:
            terms["dense"] = (pr.indices, pr.S)
        return terms

    def evaluate(self, X=None, want_J: bool = True):
        """Whitened, robust-weighted residuals ``r`` and Jacobian ``J`` w.r.t. the active variables."""
        X = self.X if X is None else X
        groups = [self._range_terms(X, "ranges", want_J), self._range_terms(X, "vas", want_J),
                  self._imu_terms(X, want_J), self._odom_terms(X, want_J),
                  self._pose_prior_terms(X, want_J), self._cp_prior_terms(X, want_J),
                  self._prior_terms(X, want_J)]
        groups = [g for g in groups if g is not None]
        n_rows = sum(g["e"].size for g in groups)
        r = np.zeros(n_rows)
        cost = 0.0
        ncol = 3 * self.n_active
        J = np.zeros((n_rows, ncol)) if want_J else None
        tri_r, tri_c, tri_v = [], [], []
        row = 0
        k = self.config.huber_k
        for g in groups:
            e, w = g["e"], g["w"]
            m = e.size
            r[row:row + m] = w * e
            if g["robust"] and self.config.huber:
                a = np.abs(e)
                cost += float(np.sum(np.where(a <= k, e * e, 2 * k * a - k * k)))
            else:
                cost += float(e @ e)
            if want_J:
                if "diag" in g:
                    cols, vals = g["diag"]
                    J[row + np.arange(m), cols.reshape(-1)] = vals.reshape(-1)
                elif "dense" in g:
                    ind, S = g["dense"]
                    for j, cp in enumerate(ind):
                        if cp >= self.first:
                            c0 = 3 * (cp - self.first)
                            J[row:row + m, c0:c0 + 3] += S[:, 3 * j:3 * j + 3]
                else:
                    rows_per = g.get("rows", 1)
                    nf = m // rows_per
                    wr = w.reshape(nf, rows_per)
                    rr_all = row + np.arange(m).reshape(nf, rows_per)
                    for ev, Wt, D, chans in g["blocks"]:
                        # D: (nf, rows_per, len(chans)); contributes W_k * D to cp s+k
                        cp = ev.s[:, None] + np.arange(4)[None, :]  # (nf, 4)
                        act = cp >= self.first
                        if not np.any(act):
                            continue
                        coef = (Wt * act)[:, :, None, None] * (D * wr[:, :, None])[:, None, :, :]  # (nf,4,rp,nc)
                        cols = 3 * (cp - self.first)[:, :, None] + np.asarray(chans)[None, None, :]  # (nf,4,nc)
                        cols = np.where(act[:, :, None], cols, 0)
                        rows = np.broadcast_to(rr_all[:, None, :, None], coef.shape)
                        colb = np.broadcast_to(cols[:, :, None, :], coef.shape)
                        tri_r.append(rows.reshape(-1))
                        tri_c.append(colb.reshape(-1))
                        tri_v.append(coef.reshape(-1))
            row += m
        if want_J and tri_r and ncol:
            flat = np.concatenate(tri_r) * ncol + np.concatenate(tri_c)
            J += np.bincount(flat, weights=np.concatenate(tri_v), minlength=n_rows * ncol).reshape(n_rows, ncol)
        return r, J, cost

    def cost(self, X=None) -> float:
        return self.evaluate(X, want_J=False)[2]

    def retract(self, delta: np.ndarray, X=None) -> np.ndarray:
        X = (self.X if X is None else X).copy()
        X[self.first:] += delta.reshape(-1, 3)
        return X


def optimize_window(window: FactorGraphWindow, settings: LMSettings = LMSettings()) -> LMReport:
    """Levenberg-Marquardt on the active control points; writes the result into ``window.X``."""
    t0 = time.perf_counter()
    rep = LMReport(n_active=window.n_active)
    X = window.X.copy()
    r, J, cost = window.evaluate(X)
    rep.n_residuals = r.size
    rep.initial_cost = rep.final_cost = cost
    rep.costs.append(cost)
    if r.size == 0:
        rep.reason = "no residuals"
        rep.seconds = time.perf_counter() - t0
        return rep
    lam = settings.lambda_init
    H = J.T @ J
    g = J.T @ r
    while True:
        if np.max(np.abs(g), initial=0.0) < settings.grad_tol:
            rep.reason = "gradient"
            break
        if rep.iterations >= settings.max_iter:
            rep.reason = "max_iter"
            break
        d = np.diag(H).copy()
        d = np.maximum(d, 1e-9 * max(float(np.max(d)), 1e-12))
        A = H + lam * np.diag(d)
        try:
            L = np.linalg.cholesky(A)
            delta = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            rep.rank_deficient = True
            lam *= settings.lambda_up
            rep.n_rejected += 1
            rep.iterations += 1
            if lam > settings.lambda_max:
                rep.reason = "damping limit"
                break
            continue
        rep.iterations += 1
        X_new = window.retract(delta, X)
        r_new, J_new, cost_new = window.evaluate(X_new)
        if cost_new < cost:
            rel = (cost - cost_new) / max(cost, 1e-300)
            X, r, J, cost = X_new, r_new, J_new, cost_new
            rep.costs.append(cost)
            H = J.T @ J
            g = J.T @ r
            lam = max(lam * settings.lambda_down, 1e-12)
            if rel < settings.rel_tol:
                rep.reason = "relative decrease"
                break
        else:
            rep.n_rejected += 1
            lam *= settings.lambda_up
            if lam > settings.lambda_max:
                rep.reason = "damping limit"
                break
    window.X[window.first:] = X[window.first:]
    rep.final_cost = cost
    rep.seconds = time.perf_counter() - t0
    return rep


def _prior_from_factors(window: FactorGraphWindow, leaving_first: int, new_first: int) -> MarginalPrior:
    """Schur-complement prior from the factors of ``window`` absent in a window starting at ``new_first``."""
    cfg = window.config
    if cfg.keep_straddling and window.prior.is_identity:
        # dropped residuals end before K[new_first] and never touch the boundary
        return MarginalPrior()
    old = FactorGraphWindow(window.X, window.knots, window.store, leaving_first, cfg, window.prior)
    new = FactorGraphWindow(window.X, window.knots, window.store, new_first, cfg)
    dropped = FactorGraphWindow.__new__(FactorGraphWindow)
    dropped.__dict__.update(old.__dict__)
    dropped.sel = {}
    for name, val in old.sel.items():
        keep_new = set(new.sel[name][0].tolist())
        mask = np.array([i not in keep_new for i in val[0]], dtype=bool)
        idx = val[0][mask]
        evs = [_subset(e, mask) for e in val[1:]]
        dropped.sel[name] = (idx, *evs)
    # the carried prior is dropped when any of its control points leave
    if not old.prior.is_identity and np.any(old.prior.indices < new_first):
        dropped.prior = old.prior
    else:
        dropped.prior = MarginalPrior()
    r, J, _ = dropped.evaluate()
    if r.size == 0:
        return MarginalPrior()
    m = 3 * (new_first - leaving_first)
    H = J.T @ J
    b = J.T @ r
    end = min(new_first + cfg.L_w, window.X.shape[0])
    nb = 3 * (end - new_first)
    Hmm, Hmr, Hrr = H[:m, :m], H[:m, m:m + nb], H[m:m + nb, m:m + nb]
    bm, br = b[:m], b[m:m + nb]
    if not np.any(Hmr) and not np.any(Hrr):
        return MarginalPrior()
    Hinv = np.linalg.pinv(Hmm, rcond=1e-12)
    Hs = Hrr - Hmr.T @ Hinv @ Hmr
    bs = br - Hmr.T @ Hinv @ bm
    Hs = 0.5 * (Hs + Hs.T)
    ev, U = np.linalg.eigh(Hs)
    keep = ev > 1e-9 * max(float(ev.max()), 1e-300)
    if not np.any(keep):
        return MarginalPrior()
    S = np.sqrt(ev[keep])[:, None] * U[:, keep].T
    e0 = (U[:, keep].T @ bs) / np.sqrt(ev[keep])
    idx = np.arange(new_first, end)
    return MarginalPrior(indices=idx, x0=window.X[idx].copy(), S=S, e0=e0)


def _subset(ev: _Eval, mask) -> _Eval:
    out = _Eval.__new__(_Eval)
    out.s = ev.s[mask]
    out.W0 = ev.W0[mask]
    out.W1 = ev.W1[mask] if ev.W1 is not None else None
    return out


def slide_and_marginalize(window: FactorGraphWindow, new_first: int) -> tuple[FactorGraphWindow, MarginalPrior]:
    """Freeze control points ``window.first .. new_first-1`` and build the prior for the next window.

    With ``keep_straddling`` residuals that still touch an active control point
    stay in the next window (evaluated with the frozen values), so the prior
    only summarizes residuals that leave entirely.
    """
    if new_first < window.first:
        raise ValueError("a slide cannot unfreeze control points")
    if new_first >= window.X.shape[0]:
        raise ValueError("slide would leave no active control point")
    if new_first == window.first:
        return window, MarginalPrior()
    prior = _prior_from_factors(window, window.first, new_first)
    if prior.is_identity and not window.prior.is_identity and np.all(window.prior.indices >= new_first):
        prior = window.prior
    nxt = FactorGraphWindow(window.X, window.knots, window.store, new_first, window.config, prior)
    return nxt, prior
