"""Trajectory matching, rigid alignment and absolute positioning error."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RigidTransform:
    """``y = R @ x + t``; 3x3 rotation (SE(2) fits are embedded about z)."""

    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return p @ self.R.T + self.t

    @property
    def yaw(self) -> float:
        return math.atan2(self.R[1, 0], self.R[0, 0])


@dataclass
class Alignment:
    transform: RigidTransform
    t: np.ndarray  # matched estimate times
    estimate: np.ndarray  # aligned estimate positions (n, 3)
    truth: np.ndarray  # matched truth positions (n, 3)


def match_timestamps(t_est, t_ref, max_dt: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i_est, i_ref)``: each estimate time with its nearest reference time within ``max_dt``."""
    t_est = np.asarray(t_est, float)
    t_ref = np.asarray(t_ref, float)
    if t_est.size == 0 or t_ref.size == 0:
        return np.zeros(0, int), np.zeros(0, int)
    if t_ref.size == 1:
        j = np.zeros(t_est.size, int)
    else:
        j = np.clip(np.searchsorted(t_ref, t_est), 1, t_ref.size - 1)
        left = j - 1
        j = np.where(np.abs(t_ref[left] - t_est) <= np.abs(t_ref[j] - t_est), left, j)
    ok = np.abs(t_ref[j] - t_est) <= max_dt
    return np.flatnonzero(ok), j[ok]


def umeyama(src, dst, planar: bool = True) -> RigidTransform:
    """Least-squares rotation and translation (no scale) taking ``src`` onto ``dst``."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    d = 2 if planar else 3
    mu_s, mu_d = src[:, :d].mean(0), dst[:, :d].mean(0)
    C = (dst[:, :d] - mu_d).T @ (src[:, :d] - mu_s) / src.shape[0]
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(d)
    S[-1, -1] = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    Rd = U @ S @ Vt
    R = np.eye(3)
    R[:d, :d] = Rd
    t = np.zeros(3)
    t[:d] = mu_d - Rd @ mu_s
    return RigidTransform(R, t)


def align_trajectories(t_est, p_est, t_ref, p_ref, mode: str = "se2", max_dt: float = 0.01) -> Alignment:
    """Match by nearest timestamp and fit the rigid transform minimizing the summed squared distance.

    ``mode`` is ``se2`` (rotation about z, xy translation), ``se3`` or ``none``.
    """
    p_est = _as3(p_est)
    p_ref = _as3(p_ref)
    ie, ir = match_timestamps(t_est, t_ref, max_dt)
    if ie.size < 3:
        raise ValueError(f"need at least 3 matched timestamps, found {ie.size}")
    src, dst = p_est[ie], p_ref[ir]
    if mode == "none":
        T = RigidTransform.identity()
    elif mode in ("se2", "se3"):
        T = umeyama(src, dst, planar=mode == "se2")
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    return Alignment(T, np.asarray(t_est, float)[ie], T.apply(src), dst)


def _as3(p) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, float))
    if p.shape[1] == 2:
        p = np.column_stack([p, np.zeros(p.shape[0])])
    return p[:, :3]


@dataclass
class ApeReport:
    rmse: float
    mean: float
    median: float
    max: float
    cdf: list  # (error m, cumulative fraction)
    errors: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {"rmse": self.rmse, "mean": self.mean, "median": self.median, "max": self.max,
                "n": int(self.errors.size)}

    def errors_csv(self) -> str:
        return "t,error\n" + "".join(f"{t:.9f},{e:.9f}\n" for t, e in zip(self.t, self.errors))

    def cdf_csv(self) -> str:
        return "error,fraction\n" + "".join(f"{e:.2f},{f:.9f}\n" for e, f in self.cdf)

    def to_json(self, **extra) -> str:
        return json.dumps({**self.summary(), **extra}, indent=2, sort_keys=True)


def error_cdf(errors, resolution: float = 0.01) -> list:
    """Cumulative fraction of errors ``<= e`` on a grid ``0, res, 2 res, ...`` up to the first grid point covering all."""
    e = np.sort(np.asarray(errors, float))
    n_bins = int(math.ceil(e[-1] / resolution - 1e-9)) if e[-1] > 0 else 0
    grid = np.arange(n_bins + 1) * resolution
    frac = np.searchsorted(e, grid + 1e-12, side="right") / e.size
    frac[-1] = 1.0
    return [(float(g), float(f)) for g, f in zip(grid, frac)]


def compute_ape(estimate, truth, t=None, resolution: float = 0.01) -> ApeReport:
    """Per-sample Euclidean position error of already matched/aligned positions."""
    est = _as3(estimate)
    ref = _as3(truth)
    if est.shape != ref.shape:
        raise ValueError("estimate and truth must have matching shapes")
    if est.shape[0] == 0:
        raise ValueError("no matched samples")
    err = np.linalg.norm(est - ref, axis=1)
    tt = np.arange(err.size, dtype=float) if t is None else np.asarray(t, float)
    return ApeReport(rmse=float(math.sqrt(np.mean(err ** 2))), mean=float(err.mean()),
                     median=float(np.median(err)), max=float(err.max()),
                     cdf=error_cdf(err, resolution), errors=err, t=tt)


def evaluate_trajectory(t_est, p_est, t_ref, p_ref, mode: str = "se2", max_dt: float = 0.01) -> tuple[ApeReport, Alignment]:
    al = align_trajectories(t_est, p_est, t_ref, p_ref, mode, max_dt)
    return compute_ape(al.estimate, al.truth, al.t), al
