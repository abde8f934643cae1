"""Time, rotation and pose primitives.

Rotations are stored as unit quaternions ``(w, x, y, z)`` and converted to
matrices on demand. The batched helpers (``exp_so3``, ``log_so3``, Jacobians)
work on plain numpy arrays and are what the spline and the factors use in
their inner loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this angle the trigonometric closed forms are replaced by series.
SMALL_ANGLE = 1e-8
# Series threshold for the Jacobian coefficients, which cancel badly earlier.
_JAC_SERIES = 1e-3


def validate_monotone(times, name: str = "stream") -> None:
    """Raise ``ValueError`` naming the first index where ``times`` decreases."""
    t = np.asarray(times, dtype=float)
    if t.size == 0:
        return
    if not np.all(np.isfinite(t)):
        bad = int(np.flatnonzero(~np.isfinite(t))[0])
        raise ValueError(f"{name}: non-finite timestamp at index {bad}")
    drops = np.flatnonzero(np.diff(t) < 0)
    if drops.size:
        i = int(drops[0]) + 1
        raise ValueError(f"{name}: timestamps decrease at index {i} ({t[i - 1]!r} -> {t[i]!r})")


# ----------------------------------------------------------------------------
# so(3) helpers on arrays
# ----------------------------------------------------------------------------

def hat(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, or of an (N, 3) batch."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m, tol: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`hat`.

    The input must be skew-symmetric within ``tol``; the returned vector is
    read from the antisymmetric part so small symmetric noise averages out.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"vee expects 3x3 matrices, got shape {m.shape}")
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    if np.max(np.abs(sym), initial=0.0) > tol:
        raise ValueError("matrix is not skew-symmetric within tolerance")
    a = 0.5 * (m - np.swapaxes(m, -1, -2))
    return np.stack([a[..., 2, 1], a[..., 0, 2], a[..., 1, 0]], axis=-1)


def _angle(phi: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", phi, phi))


def exp_so3(phi) -> np.ndarray:
    """Rodrigues formula, vectorized over leading axes."""
    phi = np.asarray(phi, dtype=float)
    th = _angle(phi)
    th2 = th * th
    small = th < SMALL_ANGLE
    safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def exp_so3_single(phi) -> np.ndarray:
    """Scalar-path Rodrigues for one vector; cheaper than :func:`exp_so3` in tight loops."""
    x, y, z = float(phi[0]), float(phi[1]), float(phi[2])
    th2 = x * x + y * y + z * z
    if th2 < SMALL_ANGLE * SMALL_ANGLE:
        a, b = 1.0 - th2 / 6.0, 0.5 - th2 / 24.0
    else:
        th = math.sqrt(th2)
        a, b = math.sin(th) / th, (1.0 - math.cos(th)) / th2
    xx, yy, zz, xy, xz, yz = x * x, y * y, z * z, x * y, x * z, y * z
    return np.array([
        [1.0 - b * (yy + zz), b * xy - a * z, b * xz + a * y],
        [b * xy + a * z, 1.0 - b * (xx + zz), b * yz - a * x],
        [b * xz - a * y, b * yz + a * x, 1.0 - b * (xx + yy)],
    ])


def quat_from_matrix(R) -> np.ndarray:
    """Shepperd's method, vectorized. Returns ``(..., 4)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    diag = np.stack([tr, R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]], axis=-1)
    k = np.argmax(diag, axis=-1)
    q = np.empty(R.shape[:-2] + (4,))

    def pick(mask, w, x, y, z):
        q[mask, 0] = w[mask]
        q[mask, 1] = x[mask]
        q[mask, 2] = y[mask]
        q[mask, 3] = z[mask]

    r00, r01, r02 = R[..., 0, 0], R[..., 0, 1], R[..., 0, 2]
    r10, r11, r12 = R[..., 1, 0], R[..., 1, 1], R[..., 1, 2]
    r20, r21, r22 = R[..., 2, 0], R[..., 2, 1], R[..., 2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = 2.0 * np.sqrt(np.maximum(1.0 + tr, 0.0))
        pick(k == 0, 0.25 * s, (r21 - r12) / s, (r02 - r20) / s, (r10 - r01) / s)
        s = 2.0 * np.sqrt(np.maximum(1.0 + r00 - r11 - r22, 0.0))
        pick(k == 1, (r21 - r12) / s, 0.25 * s, (r01 + r10) / s, (r02 + r20) / s)
        s = 2.0 * np.sqrt(np.maximum(1.0 + r11 - r00 - r22, 0.0))
        pick(k == 2, (r02 - r20) / s, (r01 + r10) / s, 0.25 * s, (r12 + r21) / s)
        s = 2.0 * np.sqrt(np.maximum(1.0 + r22 - r00 - r11, 0.0))
        pick(k == 3, (r10 - r01) / s, (r02 + r20) / s, (r12 + r21) / s, 0.25 * s)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return _canonical_quat(q)


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    """Flip sign so that ``w > 0``; at ``w == 0`` the largest |axis| entry is made positive."""
    q = np.array(q, dtype=float, copy=True)
    w = q[..., 0]
    v = q[..., 1:]
    lead = np.take_along_axis(v, np.argmax(np.abs(v), axis=-1)[..., None], axis=-1)[..., 0]
    flip = (w < 0) | ((w == 0) & (lead < 0))
    q[flip] *= -1.0
    return q


def matrix_from_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_log(q) -> np.ndarray:
    """Principal rotation vector of (batched) unit quaternions."""
    q = _canonical_quat(np.asarray(q, dtype=float))
    w = q[..., 0]
    v = q[..., 1:]
    s = np.sqrt(np.einsum("...i,...i->...", v, v))
    small = s < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    safe_w = np.where(small, np.where(w == 0, 1.0, w), 1.0)
    scale = np.where(small,
                     2.0 / safe_w * (1.0 - s * s / (3.0 * safe_w * safe_w)),
                     2.0 * np.arctan2(s, w) / safe_s)
    return scale[..., None] * v


def log_so3(R) -> np.ndarray:
    """Principal logarithm of (batched) rotation matrices, robust near 0 and pi."""
    return quat_log(quat_from_matrix(R))


def log_so3_single(R) -> np.ndarray:
    """Scalar-path logarithm of one rotation matrix (same branch choices as :func:`log_so3`)."""
    r00, r01, r02 = float(R[0, 0]), float(R[0, 1]), float(R[0, 2])
    r10, r11, r12 = float(R[1, 0]), float(R[1, 1]), float(R[1, 2])
    r20, r21, r22 = float(R[2, 0]), float(R[2, 1]), float(R[2, 2])
    tr = r00 + r11 + r22
    if tr >= r00 and tr >= r11 and tr >= r22:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        w, x, y, z = 0.25 * s, (r21 - r12) / s, (r02 - r20) / s, (r10 - r01) / s
    else:
        return log_so3(np.asarray(R, dtype=float))
    n = math.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    sv = math.sqrt(x * x + y * y + z * z)
    if sv < SMALL_ANGLE:
        scale = 2.0 / w * (1.0 - sv * sv / (3.0 * w * w))
    else:
        scale = 2.0 * math.atan2(sv, w) / sv
    return np.array([scale * x, scale * y, scale * z])


def right_jacobian_inv_single(phi) -> np.ndarray:
    """Scalar-path inverse right Jacobian for one vector."""
    x, y, z = float(phi[0]), float(phi[1]), float(phi[2])
    th2 = x * x + y * y + z * z
    if th2 < _JAC_SERIES * _JAC_SERIES:
        ci = 1.0 / 12.0 + th2 / 720.0
    else:
        th = math.sqrt(th2)
        ci = 1.0 / th2 - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + 0.5 * K + ci * (K @ K)


def _jac_coeffs(phi: np.ndarray):
    th = _angle(phi)
    th2 = th * th
    small = th < _JAC_SERIES
    safe = np.where(small, 1.0, th)
    c1 = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c2 = np.where(small, 1.0 / 6.0 - th2 / 120.0, (safe - np.sin(safe)) / safe**3)
    ci = np.where(small, 1.0 / 12.0 + th2 / 720.0,
                  1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(np.where(small, 1.0, safe))))
    return c1, c2, ci


def right_jacobian(phi) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    c1, c2, _ = _jac_coeffs(phi)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - c1[..., None, None] * K + c2[..., None, None] * (K @ K)


def right_jacobian_inv(phi) -> np.ndarray:
    """Inverse right Jacobian: Log(Exp(phi) Exp(d)) ~= phi + Jr^-1(phi) d."""
    phi = np.asarray(phi, dtype=float)
    _, _, ci = _jac_coeffs(phi)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + ci[..., None, None] * (K @ K)


def left_jacobian_inv(phi) -> np.ndarray:
    """Inverse left Jacobian: Log(Exp(d) Exp(phi)) ~= phi + Jl^-1(phi) d."""
    return right_jacobian_inv(-np.asarray(phi, dtype=float))


def rot_z(yaw) -> np.ndarray:
    """Rotation matrices about +z (batched over ``yaw``)."""
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.zeros(yaw.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def yaw_of(R) -> np.ndarray | float:
    """Heading of the body x-axis projected on the world xy-plane."""
    R = np.asarray(R, dtype=float)
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


# ----------------------------------------------------------------------------
# Value types
# ----------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Rotation:
    """Unit quaternion rotation. Composition renormalizes."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_quat(cls, q) -> "Rotation":
        w, x, y, z = (float(c) for c in q)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if not n > 0.0 or not math.isfinite(n):
            raise ValueError("quaternion must be finite and non-zero")
        return cls(w / n, x / n, y / n, z / n)

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        q = quat_from_matrix(np.asarray(R, dtype=float))
        return cls(*(float(c) for c in q))

    @classmethod
    def exp(cls, v) -> "Rotation":
        return exp_map(v)

    def as_quat(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self) -> np.ndarray:
        return matrix_from_quat(self.as_quat())

    def log(self) -> np.ndarray:
        return log_map(self)

    def inverse(self) -> "Rotation":
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def apply(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def __mul__(self, o: "Rotation") -> "Rotation":
        if not isinstance(o, Rotation):
            return NotImplemented
        w = self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z
        x = self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y
        y = self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x
        z = self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w
        n = math.sqrt(w * w + x * x + y * y + z * z)
        return Rotation(w / n, x / n, y / n, z / n)


def exp_map(v) -> Rotation:
    """Axis-angle vector to rotation. Total; uses a series below ``SMALL_ANGLE``."""
    vx, vy, vz = (float(c) for c in np.asarray(v, dtype=float).reshape(3))
    th = math.sqrt(vx * vx + vy * vy + vz * vz)
    if th < SMALL_ANGLE:
        th2 = th * th
        w = 1.0 - th2 / 8.0
        k = 0.5 - th2 / 48.0
    else:
        w = math.cos(0.5 * th)
        k = math.sin(0.5 * th) / th
    return Rotation.from_quat((w, k * vx, k * vy, k * vz))


def log_map(r: Rotation) -> np.ndarray:
    """Principal axis-angle vector (norm <= pi).

    When the angle is exactly pi (``w == 0``) the sign is fixed so that the
    axis component with the largest magnitude is positive.
    """
    return quat_log(np.array([r.w, r.x, r.y, r.z]))


@dataclass(frozen=True)
class Pose:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation * other.rotation,
                    self.translation + self.rotation.apply(other.translation))

    def inverse(self) -> "Pose":
        inv = self.rotation.inverse()
        return Pose(inv, -inv.apply(self.translation))

    def apply(self, p) -> np.ndarray:
        return self.rotation.apply(p) + self.translation
