"""Virtual anchors from one physical anchor plus short-term relative motion.

A range ``r_j`` taken at waypoint ``x_j`` is re-expressed as a range from the
reference waypoint ``x_i`` to the displaced point ``p - (x_j - x_i)``. A set of
such points (three, not collinear) makes the reference position observable
from a single physical anchor. Spawning is gated on the determinant of the
planar Fisher information of the accumulated range bearings.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import rot_z

log = logging.getLogger(__name__)

TAU_F = {"corridor": 25.0, "exhibition": 44.0, "office": 16.0}


@dataclass(frozen=True)
class VAParams:
    tau_F: float = 25.0
    eps_col: float = 0.05  # |D| threshold, m^2 (twice the triangle area)
    h: int = 36
    cap: int = 50  # waypoints per context
    min_separation: float = 0.5  # between the first two VAs, m
    waypoint_dt: float = 0.25  # subsampling of accepted ranges per anchor, s
    context_interval: float = 2.0  # new context per anchor at most this often, s
    rel_sigma: float = 0.01  # fractional error of the relative displacement
    max_deviation: float = math.pi / 4  # forced hypotheses stay within this angle of the base
    enabled: bool = True

    def __post_init__(self):
        if self.h < 3:
            raise ValueError("need at least 3 hypotheses")
        if self.cap < 3:
            raise ValueError("cap must allow three waypoints")
        if self.eps_col < 0 or self.min_separation < 0:
            raise ValueError("thresholds must be non-negative")


@dataclass(frozen=True)
class VirtualAnchor:
    position: np.ndarray
    source_anchor: str
    fim_det: float
    created_at: float  # reference time the VA ranges to
    waypoint_count: int
    range: float  # r_j, the measured range attached to this VA
    range_time: float  # t_j
    sigma: float
    forced: bool = False

    def __post_init__(self):
        p = np.array(self.position, dtype=float)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError("VA position must be a finite 3-vector")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)


@dataclass
class WaypointRangeSet:
    """Waypoints paired with the ranges measured there.

    Entry 0 is the reference pairing when used for hypothesis refinement.
    """

    waypoints: np.ndarray  # (n, 3)
    ranges: np.ndarray
    sigma: np.ndarray | float = 0.0514
    t: np.ndarray | None = None

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        self.ranges = np.atleast_1d(np.asarray(self.ranges, dtype=float))
        if self.waypoints.shape[1] == 2:
            self.waypoints = np.column_stack([self.waypoints, np.zeros(len(self.waypoints))])
        if len(self.waypoints) != len(self.ranges):
            raise ValueError("waypoints and ranges differ in length")
        if self.t is not None and np.any(np.diff(np.asarray(self.t)) < 0):
            raise ValueError("waypoints must be time-ordered")

    def __len__(self) -> int:
        return len(self.ranges)


@dataclass(frozen=True)
class VAContext:
    """Three VAs sharing one reference time, from one physical anchor."""

    anchor_id: str
    t_ref: float
    anchors: tuple
    collinearity: float

    @property
    def forced(self) -> bool:
        return any(v.forced for v in self.anchors)


# ----------------------------------------------------------------------------
# Elementary operations
# ----------------------------------------------------------------------------

def range_residual(x, p, r) -> float:
    """r - |x - p|."""
    return float(r) - float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(p, dtype=float)))


def _planar_bearings(points, candidate) -> np.ndarray:
    d = np.atleast_2d(np.asarray(points, dtype=float))[:, :2] - np.asarray(candidate, dtype=float)[:2]
    n = np.linalg.norm(d, axis=1)
    if np.any(n < 1e-12):
        raise ValueError("a waypoint coincides with the candidate; bearing undefined")
    return d / n[:, None]


def fim_from_bearings(u: np.ndarray, sigma) -> np.ndarray:
    w = 1.0 / np.broadcast_to(np.asarray(sigma, dtype=float), (u.shape[0],)) ** 2
    return (u * w[:, None]).T @ u


def accumulate_fim(ws: WaypointRangeSet, candidate) -> tuple[np.ndarray, float]:
    """Planar Fisher information of the ranges about ``candidate``: sum of u u^T / sigma^2."""
    u = _planar_bearings(ws.waypoints, candidate)
    F = fim_from_bearings(u, ws.sigma)
    return F, float(np.linalg.det(F))


def derive_va_position(anchor, relative) -> np.ndarray:
    """p - R d for ``relative = (R, d)``; R may be a 3x3 matrix or a yaw angle."""
    R, d = relative
    R = rot_z(R) if np.ndim(R) == 0 else np.asarray(R, dtype=float)
    return np.asarray(anchor, dtype=float) - R @ np.asarray(d, dtype=float)


def collinearity_determinant(p1, p2, p3) -> float:
    """det [[x1, y1, 1], [x2, y2, 1], [x3, y3, 1]] (twice the signed triangle area)."""
    (x1, y1), (x2, y2), (x3, y3) = (np.asarray(p, dtype=float)[:2] for p in (p1, p2, p3))
    return float((x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1))


def hypothesis_circle(center, radius: float, h: int, z: float) -> np.ndarray:
    """Candidates at angles 2 pi (k - 1) / h, k = 1..h, on a horizontal circle."""
    ang = 2.0 * np.pi * np.arange(h) / h
    c = np.asarray(center, dtype=float)
    return np.column_stack([c[0] + radius * np.cos(ang), c[1] + radius * np.sin(ang), np.full(h, z)])


def hypothesis_costs(candidates, ws: WaypointRangeSet) -> np.ndarray:
    d = np.linalg.norm(ws.waypoints[None, :, :] - candidates[:, None, :], axis=2)
    return np.sum(np.abs(ws.ranges[None, :] - d), axis=1)


def refine_hypotheses(base, ws: WaypointRangeSet, h: int = 36, avoid=None, eps_col: float = 0.05,
                      max_deviation: float | None = None):
    """Pick the circle hypothesis with the smallest absolute range-residual sum.

    The circle is centred on waypoint 0 with the horizontal radius implied by
    range 0 at the height of ``base``. ``avoid=(p1, p2)`` keeps only candidates
    non-collinear with those points (|D| > eps_col); ``max_deviation`` keeps
    candidates within that angle of the base direction. Ties go to the lowest
    index. Returns ``(position, index, costs)``; index is 0-based (k - 1).
    """
    if h < 3:
        raise ValueError("need at least 3 hypotheses")
    if len(ws) == 0:
        raise ValueError("empty range set")
    base = np.asarray(base, dtype=float)
    c = ws.waypoints[0]
    dz = base[2] - c[2]
    rho = math.sqrt(max(ws.ranges[0] ** 2 - dz * dz, 0.0))
    cand = hypothesis_circle(c, rho, h, base[2])
    costs = hypothesis_costs(cand, ws)
    ok = np.ones(h, dtype=bool)
    if avoid is not None:
        p1, p2 = avoid
        D = np.array([collinearity_determinant(p1, p2, b) for b in cand])
        ok &= np.abs(D) > eps_col
    if max_deviation is not None:
        ang = np.arctan2(cand[:, 1] - c[1], cand[:, 0] - c[0])
        ab = math.atan2(base[1] - c[1], base[0] - c[0])
        dev = np.abs((ang - ab + np.pi) % (2 * np.pi) - np.pi)
        ok &= dev <= max_deviation + 1e-12
    if not np.any(ok):
        return None, -1, costs
    masked = np.where(ok, costs, np.inf)
    k = int(np.argmin(masked))  # argmin returns the first minimum
    return cand[k], k, costs


# ----------------------------------------------------------------------------
# Context construction
# ----------------------------------------------------------------------------

def build_context(anchor_id: str, anchor, t, r, sigma, positions, params: VAParams,
                  heading_correction: float = 0.0) -> VAContext | None:
    """Walk from the newest entry (the reference) back in time and spawn three VAs.

    ``t, r, sigma, positions`` describe the waypoint entries newest first;
    ``positions`` are motion-prior positions of the tag at those times.
    ``heading_correction`` rotates the relative displacements (yaw, rad).
    Returns None while the criteria are not met yet.
    """
    n = min(len(t), params.cap)
    if n < 3 or not params.enabled:
        return None
    anchor = np.asarray(anchor, dtype=float)
    X = np.asarray(positions[:n], dtype=float)
    rel = X - X[0]
    if heading_correction:
        rel = rel @ rot_z(heading_correction).T
    va_pos = anchor - rel
    va_pos[:, 2] = anchor[2]
    u = _planar_bearings(X, anchor)
    w = 1.0 / np.asarray(sigma[:n], dtype=float) ** 2
    F = np.zeros((2, 2))
    chosen: list[VirtualAnchor] = []

    def make(j, det, forced=False, pos=None, extra=0.0):
        dist = float(np.linalg.norm(rel[j, :2]))
        s = math.sqrt(float(sigma[j]) ** 2 + (params.rel_sigma * dist) ** 2 + extra ** 2)
        return VirtualAnchor(position=va_pos[j] if pos is None else pos, source_anchor=anchor_id, fim_det=det,
                             created_at=float(t[0]), waypoint_count=j + 1, range=float(r[j]),
                             range_time=float(t[j]), sigma=s, forced=forced)

    for j in range(n):
        F += w[j] * np.outer(u[j], u[j])
        det = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
        if j == 0 or not det > params.tau_F:
            continue
        if not chosen:
            chosen.append(make(j, det))
        elif len(chosen) == 1:
            if np.linalg.norm(va_pos[j, :2] - chosen[0].position[:2]) >= params.min_separation:
                chosen.append(make(j, det))
        else:
            D = collinearity_determinant(chosen[0].position, chosen[1].position, va_pos[j])
            if abs(D) > params.eps_col:
                chosen.append(make(j, det))
                return VAContext(anchor_id, float(t[0]), tuple(chosen), D)
    if len(chosen) < 2 or n < params.cap:
        return None
    # cap reached without a non-collinear third VA: pick one from the hypothesis circle
    j = n - 1
    det = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    ws = WaypointRangeSet(np.vstack([X[0], X[:n] - rel[j]]), np.r_[r[j], r[:n]], np.r_[sigma[j], sigma[:n]])
    pos, k, _ = refine_hypotheses(va_pos[j], ws, params.h, avoid=(chosen[0].position, chosen[1].position),
                                  eps_col=params.eps_col, max_deviation=params.max_deviation)
    if pos is None:
        return None
    offset = float(np.linalg.norm(pos[:2] - va_pos[j, :2]))
    chosen.append(make(j, det, forced=True, pos=pos, extra=offset))
    D = collinearity_determinant(chosen[0].position, chosen[1].position, pos)
    log.debug("forced VA for %s at t=%.3f (hypothesis %d, offset %.3f m)", anchor_id, t[0], k, offset)
    return VAContext(anchor_id, float(t[0]), tuple(chosen), D)


@dataclass
class _AnchorBuffer:
    t: list = field(default_factory=list)
    r: list = field(default_factory=list)
    s: list = field(default_factory=list)
    last_context: float = -math.inf


class VAGenerator:
    """Streaming VA generation: feed accepted ranges, query contexts as motion priors become available."""

    def __init__(self, anchors, params: VAParams = VAParams()):
        self.anchors = anchors
        self.params = params
        self._buf = {a: _AnchorBuffer() for a in anchors}
        self.contexts: list[VAContext] = []

    def add_range(self, t: float, anchor_id: str, r: float, sigma: float):
        b = self._buf[anchor_id]
        if b.t and t - b.t[-1] < self.params.waypoint_dt:
            return
        b.t.append(float(t))
        b.r.append(float(r))
        b.s.append(float(sigma))
        if len(b.t) > self.params.cap:
            del b.t[0], b.r[0], b.s[0]

    def poll(self, position_fn, t_now: float, heading_fn=None) -> list[VAContext]:
        """Try to build contexts for every anchor whose newest entry is at or before ``t_now``."""
        out = []
        if not self.params.enabled:
            return out
        for aid, b in self._buf.items():
            if len(b.t) < 3 or b.t[-1] > t_now or b.t[-1] - b.last_context < self.params.context_interval:
                continue
            t = np.array(b.t[::-1])
            pos = position_fn(t)
            corr = heading_fn(t[0]) if heading_fn is not None else 0.0
            ctx = build_context(aid, self.anchors[aid], t, np.array(b.r[::-1]), np.array(b.s[::-1]), pos,
                                self.params, corr)
            if ctx is not None:
                b.last_context = float(t[0])
                out.append(ctx)
        self.contexts.extend(out)
        return out


def va_pipeline(uwb_t, uwb_anchor, uwb_range, uwb_sigma, position_fn, anchors,
                params: VAParams = VAParams()) -> list[VAContext]:
    """Batch form: stream accepted ranges in time order and collect all contexts."""
    gen = VAGenerator(anchors, params)
    for t, a, r, s in zip(uwb_t, uwb_anchor, uwb_range, uwb_sigma):
        gen.add_range(float(t), str(a), float(r), float(s))
        gen.poll(position_fn, float(t))
    return gen.contexts
