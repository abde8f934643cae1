"""Dataset and run-configuration files.

Datasets are JSON lines, one record per line with a ``type`` field:

    {"type": "header", "anchors": {"A0": [x, y, z]}, "initial": {...}, "meta": {...}}
    {"type": "imu", "t": 0.000000000, "gyro": [..3], "accel": [..3]}
    {"type": "odom", "t": 0.000000000, "v": 0.1, "w": 0.0}
    {"type": "uwb", "t": 0.000000000, "anchor": "A0", "range": 3.2, "sigma": 0.0514}

The header is optional and, when present, must be the first line. Values are
written with ``repr`` so a save/load round trip is exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .backend import LMSettings, WindowConfig, WindowPolicy
from .ekf import AdaptiveGateParams, ImuNoise, OdomNoise
from .estimator import EstimatorConfig, InitialPose
from .preprocessing import AnchorMap, ImuSample, OdomSample, SensorStreams, UwbRangeMeasurement
from .simulator import SensorNoiseConfig
from .spline import KnotBinConfig
from .virtual_anchor import VAParams


class DatasetError(ValueError):
    """Malformed or inconsistent dataset file."""


class ConfigError(ValueError):
    """Invalid run configuration."""


# ----------------------------------------------------------------------------
# Datasets
# ----------------------------------------------------------------------------

@dataclass
class Dataset:
    streams: SensorStreams
    anchors: AnchorMap = field(default_factory=AnchorMap)
    initial: InitialPose | None = None
    meta: dict = field(default_factory=dict)


def _fmt_t(t: float) -> str:
    s = f"{t:.9f}"
    return s if float(s) == t else repr(float(t))


def _vec(v) -> str:
    return "[" + ", ".join(repr(float(x)) for x in v) + "]"


def dataset_lines(ds: Dataset):
    """Serialized lines, header first, then all records merged by time (imu, odom, uwb on ties)."""
    head = {"type": "header", "anchors": {k: [float(x) for x in v] for k, v in ds.anchors.items()},
            "meta": ds.meta}
    if ds.initial is not None:
        head["initial"] = {k: float(v) for k, v in asdict(ds.initial).items()}
    yield json.dumps(head, sort_keys=True)
    s = ds.streams
    keyed = []
    for i, t in enumerate(s.imu_t):
        keyed.append((t, 0, i))
    for i, t in enumerate(s.odom_t):
        keyed.append((t, 1, i))
    for i, t in enumerate(s.uwb_t):
        keyed.append((t, 2, i))
    keyed.sort()
    for t, kind, i in keyed:
        if kind == 0:
            yield f'{{"type": "imu", "t": {_fmt_t(t)}, "gyro": {_vec(s.gyro[i])}, "accel": {_vec(s.accel[i])}}}'
        elif kind == 1:
            yield f'{{"type": "odom", "t": {_fmt_t(t)}, "v": {float(s.odom_v[i])!r}, "w": {float(s.odom_w[i])!r}}}'
        else:
            yield (f'{{"type": "uwb", "t": {_fmt_t(t)}, "anchor": {json.dumps(str(s.uwb_anchor[i]))}, '
                   f'"range": {float(s.uwb_range[i])!r}, "sigma": {float(s.uwb_sigma[i])!r}}}')


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in dataset_lines(ds):
            f.write(line + "\n")


def _num(rec, key, lineno, n=None):
    if key not in rec:
        raise DatasetError(f"line {lineno}: missing field {key!r}")
    v = rec[key]
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise DatasetError(f"line {lineno}: field {key!r} is not numeric") from None
    if n is None:
        if arr.ndim != 0:
            raise DatasetError(f"line {lineno}: field {key!r} must be a scalar")
    elif arr.shape != (n,):
        raise DatasetError(f"line {lineno}: field {key!r} must have {n} entries")
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"line {lineno}: field {key!r} is not finite")
    return float(arr) if n is None else tuple(float(x) for x in arr)


def load_dataset(path) -> Dataset:
    """Parse a JSON-lines dataset; errors name the offending line."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: no such file")
    uwb, imu, odom = [], [], []
    last = {"uwb": -math.inf, "imu": -math.inf, "odom": -math.inf}
    anchors, initial, meta = AnchorMap(), None, {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: not valid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or "type" not in rec:
                raise DatasetError(f"line {lineno}: record needs a 'type' field")
            kind = rec["type"]
            if kind == "header":
                if uwb or imu or odom or anchors:
                    raise DatasetError(f"line {lineno}: header must be the first record")
                try:
                    anchors = AnchorMap({str(k): tuple(float(x) for x in v) for k, v in rec.get("anchors", {}).items()})
                    if "initial" in rec:
                        initial = InitialPose(**{k: float(v) for k, v in rec["initial"].items()})
                except (TypeError, ValueError) as e:
                    raise DatasetError(f"line {lineno}: bad header ({e})") from None
                meta = dict(rec.get("meta", {}))
                continue
            if kind not in last:
                raise DatasetError(f"line {lineno}: unknown record type {kind!r}")
            t = _num(rec, "t", lineno)
            if t < last[kind]:
                raise DatasetError(f"line {lineno}: {kind} timestamp {t!r} precedes {last[kind]!r}")
            last[kind] = t
            if kind == "imu":
                imu.append(ImuSample(t, _num(rec, "gyro", lineno, 3), _num(rec, "accel", lineno, 3)))
            elif kind == "odom":
                odom.append(OdomSample(t, _num(rec, "v", lineno), _num(rec, "w", lineno)))
            else:
                if "anchor" not in rec:
                    raise DatasetError(f"line {lineno}: missing field 'anchor'")
                sigma = _num(rec, "sigma", lineno) if "sigma" in rec else 0.0514
                try:
                    uwb.append(UwbRangeMeasurement(t, str(rec["anchor"]), _num(rec, "range", lineno), sigma))
                except ValueError as e:
                    raise DatasetError(f"line {lineno}: {e}") from None
    return Dataset(SensorStreams.from_records(uwb, imu, odom), anchors, initial, meta)


def save_truth_csv(path, t, xy, yaw, z=None) -> None:
    """Ground truth or estimate as ``t,x,y,z,yaw`` CSV."""
    t = np.asarray(t, float)
    z = np.zeros_like(t) if z is None else np.broadcast_to(np.asarray(z, float), t.shape)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("t,x,y,z,yaw\n")
        for row in zip(t, xy[:, 0], xy[:, 1], z, yaw):
            f.write(",".join(f"{v:.9f}" for v in row) + "\n")


def load_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """``(t, pose)`` with pose columns ``x, y, z, yaw``."""
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise DatasetError(f"{path}: {e}") from None
    if arr.shape[1] != 5:
        raise DatasetError(f"{path}: expected columns t,x,y,z,yaw")
    return arr[:, 0], arr[:, 1:]


# ----------------------------------------------------------------------------
# Run configuration
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GateSection:
    xi: int = 50
    mu: float = 0.5
    alpha_acc: float = 1.22e-4
    alpha_gyro: float = 3.17e-3
    lambda_min: float = 0.56
    lambda_max: float = 6.52
    thr: float = 10.85
    enabled: bool = True


@dataclass(frozen=True)
class RangeSection:
    gamma: float = 1.25
    enabled: bool = True
    lag: float = 2.0
    bypass: float = 2.0
    speed_floor: float = 0.01
    bias: float = -0.0552
    sigma: float = 0.0514


@dataclass(frozen=True)
class KnotSection:
    mode: str = "adaptive"
    uniform_spacing: float = 1.0
    velocity_bins: tuple = (0.06, 0.12, 0.20, 0.26)
    rotation_bins: tuple = (0.20, 0.50, 0.13, 1.82)


@dataclass(frozen=True)
class WindowSection:
    period: float = 2.0
    L_min: int = 5
    L_max: int = 30
    lambda0: float = 0.02
    lambda1: float = 0.1
    beta: float = 1.0
    delta_T: float = 10.0
    L_w: int = 4
    huber: bool = True
    huber_k: float = 3.0
    keep_straddling: bool = True
    max_iterations: int = 50


@dataclass(frozen=True)
class VASection:
    enabled: bool = True
    tau_F: float = 25.0
    eps_col: float = 0.05
    h: int = 36
    cap: int = 50


@dataclass(frozen=True)
class SensorSection:
    use_imu: bool = True
    use_odom: bool = True
    odom_scale: float = 0.005


@dataclass(frozen=True)
class OutputSection:
    rate: float = 10.0
    alignment: str = "se2"


@dataclass(frozen=True)
class SceneSection:
    """Simulation scene for ``simulate``: a named anchor layout or explicit anchors."""

    name: str = "rectangle"
    profile: str = "slow"
    path: str = "rectangular"
    side: tuple = (20.0, 10.0)
    duration: float | None = None
    weave_rate: float = 0.0
    fast_weave_rate: float = 0.0
    anchors: dict | None = None
    edge_anchors: dict | None = None  # path element -> visible anchor ids


@dataclass(frozen=True)
class RunConfig:
    gate: GateSection = GateSection()
    range: RangeSection = RangeSection()
    knots: KnotSection = KnotSection()
    window: WindowSection = WindowSection()
    va: VASection = VASection()
    sensors: SensorSection = SensorSection()
    output: OutputSection = OutputSection()
    scene: SceneSection = SceneSection()
    noise: SensorNoiseConfig = SensorNoiseConfig()
    seed: int = 0

    def __post_init__(self):
        try:
            self.estimator_config()
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        if self.output.rate <= 0:
            raise ConfigError("output.rate must be positive")
        if self.output.alignment not in ("se2", "se3", "none"):
            raise ConfigError(f"output.alignment must be se2, se3 or none, not {self.output.alignment!r}")
        if self.range.sigma <= 0 or self.range.gamma <= 0:
            raise ConfigError("range.sigma and range.gamma must be positive")
        if self.window.L_w < 1:
            raise ConfigError("window.L_w must be at least 1")

    def estimator_config(self) -> EstimatorConfig:
        g, r, k, w, v, s = self.gate, self.range, self.knots, self.window, self.va, self.sensors
        bins = KnotBinConfig(velocity_bins=tuple(k.velocity_bins), rotation_bins=tuple(sorted(k.rotation_bins)))
        return EstimatorConfig(
            window=w.period, gamma=r.gamma, gate_enabled=r.enabled, gate_lag=r.lag, gate_bypass=r.bypass,
            speed_floor=r.speed_floor, knot_mode=k.mode, uniform_spacing=k.uniform_spacing, bins=bins,
            policy=WindowPolicy(L_min=w.L_min, L_max=w.L_max, lambda0=w.lambda0, lambda1=w.lambda1,
                                beta=w.beta, delta_T=w.delta_T),
            window_config=WindowConfig(huber=w.huber, huber_k=w.huber_k, keep_straddling=w.keep_straddling,
                                       L_w=w.L_w),
            lm=LMSettings(max_iter=w.max_iterations),
            va=VAParams(tau_F=v.tau_F, eps_col=v.eps_col, h=v.h, cap=v.cap, enabled=v.enabled),
            use_imu=s.use_imu, use_odom=s.use_odom,
            imu_noise=ImuNoise(),
            odom_noise=OdomNoise(scale=s.odom_scale),
            ekf_params=AdaptiveGateParams(xi=g.xi, mu=g.mu, alpha=g.alpha_gyro, lambda_min=g.lambda_min,
                                          lambda_max=g.lambda_max, thr=g.thr, enabled=g.enabled),
            range_bias=r.bias,
        )


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    defaults = cls()
    for name, val in data.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            kw[name] = _build(type(default), val, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(val, list):
            kw[name] = tuple(val)
        elif isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{where}.{name}: expected true/false")
        elif isinstance(default, (int, float)) and not isinstance(default, bool) and val is not None:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            if isinstance(default, int) and not float(val).is_integer():
                raise ConfigError(f"{where}.{name}: expected an integer")
            kw[name] = type(default)(val)
        else:
            kw[name] = val
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "config")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from None
    return config_from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with whole sections or fields replaced, e.g. ``knots={"mode": "uniform"}``."""
    kw = {}
    for name, val in sections.items():
        cur = getattr(cfg, name)
        kw[name] = replace(cur, **val) if isinstance(val, dict) and is_dataclass(cur) else val
    return replace(cfg, **kw)
