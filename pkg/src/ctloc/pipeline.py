"""End-to-end driver: scenario simulation, estimation, export, evaluation and ablation arms."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .baselines import DiscreteEkfConfig, TimedPoses, dead_reckoning, discrete_ekf
from .ekf import PlanarConstraint, run_filter
from .estimator import EstimatorResult, InitialPose, run_smoother
from .io import Dataset, RunConfig, with_overrides
from .metrics import ApeReport, evaluate_trajectory
from .preprocessing import AnchorMap
from .simulator import MotionProfile, SceneConfig, SimulatedDataset, scene_anchors, simulate

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class NumericalError(PipelineError):
    """The estimate became non-finite or a solver broke down."""


# ----------------------------------------------------------------------------
# Scenarios
# ----------------------------------------------------------------------------

RECTANGLE_ANCHORS = {"A0": (-2.0, -1.5, 1.2), "A1": (21.5, -1.5, 1.2), "A2": (21.5, 11.5, 1.2),
                     "A3": (-2.0, 11.5, 1.2)}
# path element -> visible anchors: the two anchors at the ends of the current side
RECTANGLE_EDGES = {0: ("A0", "A1"), 1: ("A1", "A2"), 2: ("A1", "A2"), 3: ("A2", "A3"), 4: ("A2", "A3"),
                   5: ("A3", "A0"), 6: ("A3", "A0"), 7: ("A0", "A1")}


def build_scenario(cfg: RunConfig) -> tuple[MotionProfile, SceneConfig, dict | None]:
    sc = cfg.scene
    prof = MotionProfile(kind=sc.profile, path=sc.path, side=tuple(sc.side), duration=sc.duration,
                         weave_rate=sc.weave_rate, fast_weave_rate=sc.fast_weave_rate, seed=cfg.seed)
    edges = None
    if sc.anchors is not None:
        anchors = AnchorMap({str(k): tuple(v) for k, v in sc.anchors.items()})
    elif sc.name == "rectangle":
        anchors = AnchorMap(RECTANGLE_ANCHORS)
        edges = RECTANGLE_EDGES
    else:
        try:
            anchors = scene_anchors(sc.name)
        except KeyError:
            raise ValueError(f"unknown scene {sc.name!r}") from None
    if sc.edge_anchors is not None:
        edges = {int(k): tuple(v) for k, v in sc.edge_anchors.items()}
    return prof, SceneConfig(anchors=anchors), edges


def simulate_scenario(cfg: RunConfig, seed: int | None = None) -> SimulatedDataset:
    prof, scene, edges = build_scenario(cfg)
    return simulate(prof, scene, cfg.noise, seed=cfg.seed if seed is None else seed, edge_anchors=edges)


def initial_from_truth(sim: SimulatedDataset) -> InitialPose:
    tr = sim.truth
    t0 = float(tr.t[0])
    p = tr.position_at(t0)
    return InitialPose(t0, float(p[0]), float(p[1]), float(tr.yaw_at(t0)), height=float(p[2]))


def to_dataset(sim: SimulatedDataset, meta: dict | None = None) -> Dataset:
    return Dataset(sim.streams, sim.anchors, initial_from_truth(sim), dict(meta or {}))


def truth_samples(sim: SimulatedDataset, rate: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """Truth ``(t, pose)`` with pose columns ``x, y, z, yaw`` on a regular grid."""
    tr = sim.truth
    n = int(math.floor(tr.duration * rate + 1e-9)) + 1
    t = np.round(tr.t[0] + np.arange(n) / rate, 9)
    p = tr.position_at(t)
    return t, np.column_stack([p, tr.yaw_at(t)])


# ----------------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------------

@dataclass
class PipelineResult:
    estimate: EstimatorResult
    t: np.ndarray  # export times
    pose: np.ndarray  # (n, 4): x, y, z, yaw
    report: ApeReport | None = None
    run_log: dict = field(default_factory=dict)


def export_grid(t_min: float, t_max: float, rate: float) -> np.ndarray:
    n = int(math.floor((t_max - t_min) * rate + 1e-9)) + 1
    return np.round(t_min + np.arange(n) / rate, 9)


def run_pipeline(cfg: RunConfig, ds: Dataset, truth=None, ekf=None) -> PipelineResult:
    """Estimate the trajectory of ``ds``; with ``truth = (t, pose)`` also compute the APE report."""
    if ds.initial is None:
        raise PipelineError("preprocessing", "dataset has no initial pose in its header")
    s = ds.streams
    if s.imu_t.size < 2 or s.odom_t.size < 2:
        raise PipelineError("preprocessing", "need IMU and odometer streams")
    missing = sorted(set(map(str, s.uwb_anchor)) - set(ds.anchors))
    if missing:
        raise PipelineError("preprocessing", f"ranges to unknown anchors {missing}")
    ecfg = cfg.estimator_config()
    init = ds.initial
    if ekf is None:
        try:
            ekf = run_filter(s, init.filter_state(), ecfg.imu_noise, ecfg.odom_noise, ecfg.ekf_params,
                             PlanarConstraint(height=init.height))
        except (ValueError, np.linalg.LinAlgError) as e:
            raise PipelineError("ekf_fusion", str(e)) from e
        if not np.all(np.isfinite(ekf.history.view("p"))):
            raise NumericalError("ekf_fusion", "filter state became non-finite")
    try:
        est = run_smoother(s, ds.anchors, init, ecfg, ekf=ekf)
    except np.linalg.LinAlgError as e:
        raise NumericalError("backend_optimizer", str(e)) from e
    except ValueError as e:
        raise PipelineError("backend_optimizer", str(e)) from e
    traj = est.trajectory
    t = export_grid(traj.t_min, traj.t_max, cfg.output.rate)
    x = traj.sample(t)
    if not np.all(np.isfinite(x)):
        raise NumericalError("backend_optimizer", "estimate is non-finite")
    pose = np.column_stack([x[:, :2], np.full(t.size, traj.height), x[:, 2]])
    ms = np.array([r.seconds for r in est.reports]) * 1e3
    run_log = {"windows": len(est.reports), "control_points": int(traj.X.shape[0]),
               "ranges_used": int(est.n_ranges_used), "ranges_rejected": len(est.gate.rejected),
               "virtual_anchor_contexts": len(est.contexts),
               "window_ms_mean": float(ms.mean()) if ms.size else 0.0,
               "window_ms_max": float(ms.max()) if ms.size else 0.0, "seconds": float(est.seconds)}
    report = None
    if truth is not None:
        try:
            report, _ = evaluate_trajectory(t, pose[:, :3], truth[0], truth[1][:, :3], cfg.output.alignment)
        except ValueError as e:
            raise PipelineError("evaluation", str(e)) from e
    return PipelineResult(est, t, pose, report, run_log)


# ----------------------------------------------------------------------------
# Baselines and ablation
# ----------------------------------------------------------------------------

def run_baselines(cfg: RunConfig, ds: Dataset, ekf=None) -> dict[str, TimedPoses]:
    """Dead reckoning, the discrete range EKF and the inertial filter alone."""
    init = ds.initial
    x0 = (init.x, init.y, init.yaw)
    dcfg = DiscreteEkfConfig(range_bias=cfg.range.bias, range_sigma=cfg.range.sigma, height=init.height,
                             scale=cfg.sensors.odom_scale)
    out = {"dead_reckoning": dead_reckoning(ds.streams, x0, init.t),
           "discrete_ekf": discrete_ekf(ds.streams, ds.anchors, x0, init.t, dcfg)}
    if ekf is not None:
        h = ekf.history
        t = h.view("t")
        R, p = h.view("R"), h.view("p")
        yaw = np.arctan2(R[:, 1, 0], R[:, 0, 0])
        out["inertial_ekf"] = TimedPoses(t.copy(), np.column_stack([p[:, :2], yaw]))
    return out


def ape_of(poses: TimedPoses, truth, rate: float = 10.0, mode: str = "se2") -> ApeReport:
    t = export_grid(max(poses.t[0], truth[0][0]), min(poses.t[-1], truth[0][-1]), rate)
    x = poses.sample(t)
    return evaluate_trajectory(t, x[:, :2], truth[0], truth[1][:, :2], mode)[0]


ABLATION_ARMS = ("full", "uniform_knots", "no_gate", "no_va")


def ablation_config(cfg: RunConfig, arm: str, uniform_spacing: float | None = None) -> RunConfig:
    if arm == "full":
        return cfg
    if arm == "uniform_knots":
        if uniform_spacing is None:
            raise ValueError("uniform_knots needs the matched spacing")
        return with_overrides(cfg, knots={"mode": "uniform", "uniform_spacing": float(uniform_spacing)})
    if arm == "no_gate":
        return with_overrides(cfg, gate={"enabled": False})
    if arm == "no_va":
        return with_overrides(cfg, va={"enabled": False})
    raise ValueError(f"unknown ablation arm {arm!r}")


def matched_spacing(result: EstimatorResult) -> float:
    """Uniform knot spacing giving the same mean control-point density as ``result``."""
    bp = result.breakpoints
    return float((bp[-1] - bp[0]) / (len(bp) - 1))


def run_ablation(cfg: RunConfig, ds: Dataset, truth, arms=ABLATION_ARMS) -> dict[str, PipelineResult]:
    """Run each arm on the same data; arms sharing the inertial filter reuse it."""
    full = run_pipeline(cfg, ds, truth)
    out = {"full": full}
    h = matched_spacing(full.estimate)
    for arm in arms:
        if arm == "full":
            continue
        acfg = ablation_config(cfg, arm, h)
        share = acfg.gate == cfg.gate
        out[arm] = run_pipeline(acfg, ds, truth, ekf=full.estimate.ekf if share else None)
    return out
