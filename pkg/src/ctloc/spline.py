"""Non-uniform cumulative cubic B-splines on R^3 and SO(3).

Knot layout: a spline with ``N`` control points has ``N + 4`` knots. Segment
``s`` (``0 <= s <= N - 4``) lives on ``[K[s+3], K[s+4]]`` and is blended from
control points ``s .. s+3``. The evaluable support is therefore
``[K[3], K[N]]``; the three knots on either side only shape the end segments.

Per segment the order-4 blending matrix ``M`` maps the power vector
``[1, u, u^2, u^3]`` (``u`` normalized time in the segment) to the four basis
weights. It is built once from the Cox-de Boor recursion carried out on
polynomials in ``u``. The cumulative form suffix-sums the rows of ``M``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Rotation,
    exp_so3,
    left_jacobian_inv,
    log_so3,
    right_jacobian,
    right_jacobian_inv,
)

ORDER = 4
DEGREE = ORDER - 1

# Classical uniform cubic B-spline matrix (rows: control point offset 0..3).
UNIFORM_BLENDING = np.array([
    [1.0, -3.0, 3.0, -1.0],
    [4.0, 0.0, -6.0, 3.0],
    [1.0, 3.0, 3.0, -3.0],
    [0.0, 0.0, 0.0, 1.0],
]) / 6.0
UNIFORM_CUMULATIVE = np.array([
    [6.0, 0.0, 0.0, 0.0],
    [5.0, 3.0, -3.0, 1.0],
    [1.0, 3.0, 3.0, -2.0],
    [0.0, 0.0, 0.0, 1.0],
]) / 6.0


def _polymul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(len(a) + len(b) - 1)
    for i, ai in enumerate(a):
        out[i:i + len(b)] += ai * b
    return out


def blending_matrix(knots, segment: int) -> np.ndarray:
    """Order-4 blending matrix of ``segment`` for an arbitrary knot vector.

    Row ``j`` holds the power-basis coefficients (in ``u``) of the B-spline
    basis function attached to control point ``segment + j``.
    """
    K = np.asarray(knots, dtype=float)
    i = segment + DEGREE  # knot interval index
    if segment < 0 or i + DEGREE + 1 >= len(K) + 1 or i + 1 >= len(K):
        raise IndexError(f"segment {segment} outside knot vector of length {len(K)}")
    t0, t1 = K[i], K[i + 1]
    dt = t1 - t0
    if not dt > 0.0:
        raise ValueError(f"segment {segment} has a zero-length span")
    # N[j] holds the degree-p basis function with index i - p + j, j = 0..p
    N = [np.array([1.0])]
    for p in range(1, DEGREE + 1):
        nxt = []
        for j in range(p + 1):
            idx = i - p + j  # global basis index
            acc = np.zeros(p + 1)
            # left term uses N_{idx, p-1}, present when j >= 1
            if j >= 1:
                den = K[idx + p] - K[idx]
                if den > 0.0:
                    lin = np.array([t0 - K[idx], dt]) / den
                    acc[:p + 1] += _polymul(lin, N[j - 1])[:p + 1]
            # right term uses N_{idx+1, p-1}, present when j <= p - 1
            if j <= p - 1:
                den = K[idx + p + 1] - K[idx + 1]
                if den > 0.0:
                    lin = np.array([K[idx + p + 1] - t0, -dt]) / den
                    acc[:p + 1] += _polymul(lin, N[j])[:p + 1]
            nxt.append(acc)
        N = nxt
    return np.vstack(N)


def cumulative_matrix(M: np.ndarray) -> np.ndarray:
    """Suffix sums of the blending rows: row j = sum_{m >= j} M[m]."""
    return np.cumsum(M[::-1], axis=0)[::-1].copy()


def _powers(u: np.ndarray, order: int, dt) -> np.ndarray:
    """d^order/dt^order of [1, u, u^2, u^3] with u = (t - t0)/dt; shape (n, 4)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape + (4,))
    if order == 0:
        out[..., 0] = 1.0
        out[..., 1] = u
        out[..., 2] = u * u
        out[..., 3] = u * u * u
        return out
    if order == 1:
        out[..., 1] = 1.0
        out[..., 2] = 2.0 * u
        out[..., 3] = 3.0 * u * u
        return out / np.asarray(dt)[..., None]
    if order == 2:
        out[..., 2] = 2.0
        out[..., 3] = 6.0 * u
        return out / (np.asarray(dt) ** 2)[..., None]
    raise ValueError(f"unsupported derivative order {order}")


class KnotVector:
    """Non-decreasing knot vector with cached per-segment blending matrices.

    The object is mutated only through :meth:`extend` (single writer).
    """

    def __init__(self, knots):
        k = np.array(knots, dtype=float).reshape(-1)
        if k.size < 2 * ORDER:
            raise ValueError(f"need at least {2 * ORDER} knots, got {k.size}")
        if not np.all(np.isfinite(k)):
            raise ValueError("knots must be finite")
        if np.any(np.diff(k) < 0):
            raise ValueError("knots must be non-decreasing")
        self._k = k
        self._M = np.zeros((0, 4, 4))
        self._valid = np.zeros(0, dtype=bool)
        self._rebuild_from(0)

    @classmethod
    def from_breakpoints(cls, breakpoints, pad_before: float | None = None,
                         pad_after: float | None = None) -> "KnotVector":
        """Knots for a spline whose support is exactly ``[b[0], b[-1]]``.

        Three pad knots are added on each side, spaced like the adjacent span
        unless explicit spacings are given.
        """
        b = np.asarray(breakpoints, dtype=float).reshape(-1)
        if b.size < 2:
            raise ValueError("need at least two breakpoints")
        hb = pad_before if pad_before is not None else b[1] - b[0]
        ha = pad_after if pad_after is not None else b[-1] - b[-2]
        if not (hb > 0 and ha > 0):
            raise ValueError("pad spacing must be positive")
        pre = b[0] - hb * np.arange(3, 0, -1)
        post = b[-1] + ha * np.arange(1, 4)
        return cls(np.concatenate([pre, b, post]))

    # -- layout -------------------------------------------------------------
    @property
    def knots(self) -> np.ndarray:
        v = self._k.view()
        v.flags.writeable = False
        return v

    def __len__(self) -> int:
        return self._k.size

    @property
    def n_control(self) -> int:
        return self._k.size - ORDER

    @property
    def n_segments(self) -> int:
        return self.n_control - DEGREE

    @property
    def t_min(self) -> float:
        return float(self._k[DEGREE])

    @property
    def t_max(self) -> float:
        return float(self._k[self.n_control])

    def breakpoints(self) -> np.ndarray:
        return self._k[DEGREE:self.n_control + 1].copy()

    def segment_span(self, s: int) -> tuple[float, float]:
        return float(self._k[s + DEGREE]), float(self._k[s + DEGREE + 1])

    def matrix(self, s: int) -> np.ndarray:
        if not self._valid[s]:
            raise ValueError(f"segment {s} has a zero-length span")
        return self._M[s]

    def _rebuild_from(self, first: int) -> None:
        n = self.n_segments
        M = np.zeros((n, 4, 4))
        valid = np.zeros(n, dtype=bool)
        keep = min(first, self._M.shape[0])
        M[:keep] = self._M[:keep]
        valid[:keep] = self._valid[:keep]
        for s in range(keep, n):
            a, b = self.segment_span(s)
            if b > a:
                M[s] = blending_matrix(self._k, s)
                valid[s] = True
        self._M, self._valid = M, valid

    def extend(self, new_breakpoints, pad_spacing: float | None = None) -> int:
        """Append breakpoints after the current support end and re-pad.

        Returns the number of control points added (one per breakpoint).
        Only the last few segments change shape; earlier blending matrices
        are kept.
        """
        nb = np.asarray(new_breakpoints, dtype=float).reshape(-1)
        if nb.size == 0:
            return 0
        if nb[0] <= self.t_max or np.any(np.diff(nb) <= 0):
            raise ValueError("new breakpoints must strictly increase past the support end")
        h = pad_spacing if pad_spacing is not None else (nb[-1] - (nb[-2] if nb.size > 1 else self.t_max))
        if not h > 0:
            raise ValueError("pad spacing must be positive")
        n_old = self.n_control
        head = self._k[:n_old + 1]
        post = nb[-1] + h * np.arange(1, 4)
        self._k = np.concatenate([head, nb, post])
        # segments whose knot window touched the old pads: s + 6 >= n_old + 1
        self._rebuild_from(max(0, n_old - 5))
        return nb.size

    # -- lookup -------------------------------------------------------------
    def locate(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Segment index, normalized time and span length for each query time."""
        t = np.asarray(t, dtype=float)
        lo, hi = self.t_min, self.t_max
        if np.any(t < lo) or np.any(t > hi) or not np.all(np.isfinite(t)):
            bad = t[(t < lo) | (t > hi) | ~np.isfinite(t)]
            raise ValueError(f"time {bad.flat[0]!r} outside spline support [{lo!r}, {hi!r}]")
        inner = self._k[DEGREE:self.n_control]  # segment starts
        s = np.searchsorted(inner, t, side="right") - 1
        s = np.clip(s, 0, self.n_segments - 1)
        # t == t_max lands in the last segment; step back over zero spans
        while True:
            bad = ~self._valid[s]
            if not np.any(bad):
                break
            s = np.where(bad, s - 1, s)
            if np.any(s < 0):
                raise ValueError("no evaluable segment for query")
        t0 = self._k[s + DEGREE]
        dt = self._k[s + DEGREE + 1] - t0
        u = (t - t0) / dt
        return s, u, dt

    def weights(self, t, order: int = 0):
        """Basis weights ``(n, 4)`` of derivative ``order`` and segment indices."""
        s, u, dt = self.locate(np.atleast_1d(t))
        P = _powers(u, order, dt)
        W = np.einsum("nij,nj->ni", self._M[s], P)
        return s, W

    def cumulative_weights(self, t, order: int = 0):
        """Cumulative coefficients lambda_1..3 (and derivatives) at ``t``."""
        s, u, dt = self.locate(np.atleast_1d(t))
        P = _powers(u, order, dt)
        Mc = np.cumsum(self._M[s][:, ::-1], axis=1)[:, ::-1]
        lam = np.einsum("nij,nj->ni", Mc[:, 1:], P)
        return s, lam


@dataclass(frozen=True)
class CumulativeBasis:
    lam: np.ndarray  # (3,) cumulative coefficients lambda_1..lambda_3
    segment: int
    u: float

    def weights(self) -> np.ndarray:
        """Non-cumulative weights implied by ``lam`` (first weight is 1 - lambda_1)."""
        full = np.concatenate([[1.0], self.lam, [0.0]])
        return full[:-1] - full[1:]


def cumulative_basis(knots: KnotVector, segment: int, t: float) -> CumulativeBasis:
    """Cumulative blending coefficients of ``segment`` at time ``t``."""
    if not isinstance(knots, KnotVector):
        knots = KnotVector(knots)
    if segment < 0 or segment >= knots.n_segments:
        raise IndexError(f"segment {segment} is not evaluable")
    a, b = knots.segment_span(segment)
    if not b > a:
        raise ValueError(f"segment {segment} has a zero-length span")
    if not (a <= t <= b):
        raise ValueError(f"t={t!r} outside segment [{a!r}, {b!r}]")
    u = (t - a) / (b - a)
    Mc = cumulative_matrix(knots.matrix(segment))
    lam = Mc[1:] @ np.array([1.0, u, u * u, u * u * u])
    return CumulativeBasis(lam=lam, segment=segment, u=float(u))


# ----------------------------------------------------------------------------
# Splines
# ----------------------------------------------------------------------------

class TranslationSpline:
    """Cubic B-spline in R^3 over a :class:`KnotVector`."""

    def __init__(self, knots: KnotVector, control_points):
        if not isinstance(knots, KnotVector):
            knots = KnotVector(knots)
        cp = np.array(control_points, dtype=float).reshape(-1, 3)
        if cp.shape[0] != knots.n_control:
            raise ValueError(f"{knots.n_control} control points required, got {cp.shape[0]}")
        if not np.all(np.isfinite(cp)):
            raise ValueError("control points must be finite")
        self.knots = knots
        self.control_points = cp

    def evaluate(self, t, order: int = 0) -> np.ndarray:
        """Position (order 0), velocity (1) or acceleration (2); batched over ``t``."""
        scalar = np.ndim(t) == 0
        s, W = self.knots.weights(t, order)
        idx = s[:, None] + np.arange(4)
        out = np.einsum("ni,nij->nj", W, self.control_points[idx])
        return out[0] if scalar else out


class RotationSpline:
    """Cumulative cubic B-spline on SO(3): R(t) = R_s prod_j Exp(lambda_j Psi_j)."""

    def __init__(self, knots: KnotVector, control_points):
        if not isinstance(knots, KnotVector):
            knots = KnotVector(knots)
        if len(control_points) and isinstance(control_points[0], Rotation):
            R = np.stack([r.matrix() for r in control_points])
        else:
            R = np.array(control_points, dtype=float).reshape(-1, 3, 3)
        if R.shape[0] != knots.n_control:
            raise ValueError(f"{knots.n_control} control rotations required, got {R.shape[0]}")
        self.knots = knots
        self.control_points = R
        self._psi = None

    def invalidate(self) -> None:
        self._psi = None

    def increments(self) -> np.ndarray:
        """Psi_k = Log(R_k^T R_{k+1}) for consecutive control rotations."""
        if self._psi is None or self._psi.shape[0] != self.control_points.shape[0] - 1:
            R = self.control_points
            self._psi = log_so3(np.swapaxes(R[:-1], -1, -2) @ R[1:])
        return self._psi

    def _parts(self, t):
        s, lam = self.knots.cumulative_weights(t, 0)
        psi = self.increments()[s[:, None] + np.arange(3)]  # (n, 3, 3): rows j = 1..3
        A = exp_so3(lam[:, :, None] * psi)  # (n, 3, 3, 3)
        return s, lam, psi, A

    def evaluate(self, t) -> np.ndarray:
        """Rotation matrices at ``t``; shape (3, 3) for scalar input."""
        scalar = np.ndim(t) == 0
        s, _, _, A = self._parts(t)
        R = self.control_points[s] @ A[:, 0] @ A[:, 1] @ A[:, 2]
        return R[0] if scalar else R

    def angular_velocity(self, t) -> np.ndarray:
        """Body-frame angular velocity (R^T dR/dt)^vee; batched over ``t``."""
        scalar = np.ndim(t) == 0
        s, lam, psi, A = self._parts(t)
        _, dlam = self.knots.cumulative_weights(t, 1)
        At = np.swapaxes(A, -1, -2)
        w = dlam[:, 0, None] * psi[:, 0]
        w = np.einsum("nij,nj->ni", At[:, 1], w) + dlam[:, 1, None] * psi[:, 1]
        w = np.einsum("nij,nj->ni", At[:, 2], w) + dlam[:, 2, None] * psi[:, 2]
        return w[0] if scalar else w

    def evaluate_with_jacobian(self, t):
        """Rotations and d(eps)/d(delta_{s+k}) blocks for right perturbations.

        ``R(t) Exp(eps)`` is the response to ``R_{s+k} <- R_{s+k} Exp(delta)``;
        returns ``(s, R, J)`` with ``J`` of shape (n, 4, 3, 3).
        """
        s, lam, psi, A = self._parts(np.atleast_1d(t))
        R = self.control_points[s] @ A[:, 0] @ A[:, 1] @ A[:, 2]
        n = s.size
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        # P_j = A_{j+1} ... A_3 (product after factor j), j = 0..3
        P3 = eye
        P2 = A[:, 2]
        P1 = A[:, 1] @ A[:, 2]
        P0 = A[:, 0] @ P1
        Pt = [np.swapaxes(P, -1, -2) for P in (P0, P1, P2, P3)]
        Jr = right_jacobian(lam[:, :, None] * psi)  # (n, 3, 3, 3)
        D = [Pt[j + 1] @ Jr[:, j] * lam[:, j, None, None] for j in range(3)]
        flat = psi.reshape(-1, 3)
        Jri = right_jacobian_inv(flat).reshape(n, 3, 3, 3)
        Jli = left_jacobian_inv(flat).reshape(n, 3, 3, 3)
        J = np.empty((n, 4, 3, 3))
        J[:, 0] = Pt[0] - D[0] @ Jli[:, 0]
        J[:, 1] = D[0] @ Jri[:, 0] - D[1] @ Jli[:, 1]
        J[:, 2] = D[1] @ Jri[:, 1] - D[2] @ Jli[:, 2]
        J[:, 3] = D[2] @ Jri[:, 2]
        return s, R, J


def evaluate_position(spline: TranslationSpline, t: float, derivative_order: int = 0) -> np.ndarray:
    """Single-time evaluation in the cumulative form cp_s + sum_j lambda_j d_j."""
    if derivative_order not in (0, 1, 2):
        raise ValueError("derivative_order must be 0, 1 or 2")
    s, lam = spline.knots.cumulative_weights(np.array([t]), derivative_order)
    s = int(s[0])
    cp = spline.control_points
    d = cp[s + 1:s + 4] - cp[s:s + 3]
    base = cp[s] if derivative_order == 0 else np.zeros(3)
    return base + lam[0] @ d


def evaluate_rotation(spline: RotationSpline, t: float, derivative_order: int = 0):
    """Rotation (order 0, as :class:`Rotation`) or body angular velocity (order 1)."""
    if derivative_order == 0:
        return Rotation.from_matrix(spline.evaluate(float(t)))
    if derivative_order == 1:
        return spline.angular_velocity(float(t))
    raise ValueError("derivative_order must be 0 or 1")


class TrajectorySpline:
    """Split trajectory: translation and rotation splines sharing one knot vector."""

    def __init__(self, knots: KnotVector, positions, rotations):
        if not isinstance(knots, KnotVector):
            knots = KnotVector(knots)
        self.knots = knots
        self.translation = TranslationSpline(knots, positions)
        self.rotation = RotationSpline(knots, rotations)

    @property
    def positions(self) -> np.ndarray:
        return self.translation.control_points

    @property
    def rotations(self) -> np.ndarray:
        return self.rotation.control_points

    @property
    def n_control(self) -> int:
        return self.knots.n_control

    def set_control(self, positions=None, rotations=None) -> None:
        if positions is not None:
            self.translation.control_points = np.asarray(positions, dtype=float)
        if rotations is not None:
            self.rotation.control_points = np.asarray(rotations, dtype=float)
            self.rotation.invalidate()

    def extend(self, breakpoints, positions, rotations, pad_spacing: float | None = None) -> int:
        n = self.knots.extend(breakpoints, pad_spacing)
        pos = np.asarray(positions, dtype=float).reshape(n, 3)
        rot = np.asarray(rotations, dtype=float).reshape(n, 3, 3)
        self.translation.control_points = np.vstack([self.positions, pos])
        self.rotation.control_points = np.concatenate([self.rotations, rot])
        self.rotation.invalidate()
        return n

    def copy(self) -> "TrajectorySpline":
        return TrajectorySpline(KnotVector(self.knots.knots.copy()),
                                self.positions.copy(), self.rotations.copy())

    def position(self, t, order: int = 0) -> np.ndarray:
        return self.translation.evaluate(t, order)

    def orientation(self, t) -> np.ndarray:
        return self.rotation.evaluate(t)

    def angular_velocity(self, t) -> np.ndarray:
        return self.rotation.angular_velocity(t)

    @property
    def t_min(self) -> float:
        return self.knots.t_min

    @property
    def t_max(self) -> float:
        return self.knots.t_max


# ----------------------------------------------------------------------------
# Adaptive knot-span strategy
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class KnotBinConfig:
    """Bin edges for motion variation; each list has four ascending entries."""

    velocity_bins: tuple = (0.06, 0.12, 0.20, 0.26)
    rotation_bins: tuple = (0.20, 0.50, 0.13, 1.82)

    def __post_init__(self):
        v = tuple(float(x) for x in self.velocity_bins)
        r = tuple(float(x) for x in self.rotation_bins)
        if len(v) != 4 or len(r) != 4:
            raise ValueError("bins need exactly four edges each")
        if any(b <= a for a, b in zip(v, v[1:])) or v[0] <= 0:
            raise ValueError(f"velocity bins must be positive and strictly increasing: {v}")
        if any(b < a for a, b in zip(r, r[1:])):
            warnings.warn(f"rotation bins {r} are not ascending; sorting them", stacklevel=3)
            r = tuple(sorted(r))
        if any(b <= a for a, b in zip(r, r[1:])) or r[0] <= 0:
            raise ValueError(f"rotation bins must be positive and distinct: {r}")
        object.__setattr__(self, "velocity_bins", v)
        object.__setattr__(self, "rotation_bins", r)


@dataclass(frozen=True)
class MotionVariation:
    delta_v: float
    delta_omega: float
    window: tuple
    sample_count: int


def compute_motion_variation(samples, window) -> MotionVariation:
    """Population variance of speed and angular speed for samples in ``(t0, t1]``.

    ``samples`` is an (n, 3) array-like of ``(t, speed, angular_speed)``.
    """
    t0, t1 = float(window[0]), float(window[1])
    a = np.asarray(samples, dtype=float).reshape(-1, 3)
    sel = a[(a[:, 0] > t0) & (a[:, 0] <= t1)]
    if sel.shape[0] == 0:
        raise ValueError(f"no motion samples in window ({t0}, {t1}]")
    return MotionVariation(delta_v=float(np.var(sel[:, 1])), delta_omega=float(np.var(sel[:, 2])),
                           window=(t0, t1), sample_count=int(sel.shape[0]))


def _bin_count(x: float, edges) -> int:
    return 1 + sum(1 for e in edges[:3] if x >= e)


def assign_ncp(variation: MotionVariation, bins: KnotBinConfig) -> int:
    """Control points for one window: the larger of the speed and turn-rate bins."""
    return max(_bin_count(variation.delta_v, bins.velocity_bins),
               _bin_count(variation.delta_omega, bins.rotation_bins))


def split_knot_span(window, n_cp: int) -> list[float]:
    """Knot times splitting ``(t0, t1]`` into ``n_cp`` equal spans (``t1`` included exactly)."""
    t0, t1 = float(window[0]), float(window[1])
    if not t1 > t0:
        raise ValueError(f"window ({t0}, {t1}] is not positive")
    if n_cp not in (1, 2, 3, 4):
        raise ValueError(f"n_cp must be in 1..4, got {n_cp}")
    dt = (t1 - t0) / n_cp
    return [t0 + k * dt for k in range(1, n_cp)] + [t1]
