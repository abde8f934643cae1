"""Command line: ``ctloc simulate | run | eval | ablate | config``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .io import (
    ConfigError,
    DatasetError,
    RunConfig,
    config_to_dict,
    load_config,
    load_dataset,
    load_trajectory_csv,
    save_config,
    save_dataset,
    save_truth_csv,
    with_overrides,
)
from .metrics import evaluate_trajectory
from .pipeline import (
    ABLATION_ARMS,
    NumericalError,
    PipelineError,
    ape_of,
    run_ablation,
    run_baselines,
    run_pipeline,
    simulate_scenario,
    to_dataset,
    truth_samples,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ctloc")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    return cfg


def _write_report(out: Path, report, extra=None):
    (out / "errors.csv").write_text(report.errors_csv())
    (out / "cdf.csv").write_text(report.cdf_csv())
    (out / "report.json").write_text(report.to_json(**(extra or {})) + "\n")


def _truth(path):
    return None if path is None else load_trajectory_csv(path)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        sim = simulate_scenario(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    save_dataset(out / "dataset.jsonl", to_dataset(sim, {"scene": cfg.scene.name, "seed": cfg.seed}))
    t, pose = truth_samples(sim, args.truth_rate)
    save_truth_csv(out / "truth.csv", t, pose[:, :2], pose[:, 3], pose[:, 2])
    print(f"wrote {out / 'dataset.jsonl'} and {out / 'truth.csv'} ({sim.truth.duration:.1f} s)")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.dataset)
    truth = _truth(args.truth)
    res = run_pipeline(cfg, ds, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_truth_csv(out / "estimate.csv", res.t, res.pose[:, :2], res.pose[:, 3], res.pose[:, 2])
    (out / "run_log.json").write_text(json.dumps(res.run_log, indent=2, sort_keys=True) + "\n")
    if res.report is not None:
        _write_report(out, res.report)
        print(f"APE rmse {res.report.rmse:.4f} m  mean {res.report.mean:.4f}  max {res.report.max:.4f}")
    print(f"wrote {out / 'estimate.csv'} ({res.t.size} poses, {res.run_log['windows']} windows)")
    return EXIT_OK


def cmd_eval(args) -> int:
    te, pe = load_trajectory_csv(args.estimate)
    tr, pr = load_trajectory_csv(args.truth)
    try:
        report, al = evaluate_trajectory(te, pe[:, :3], tr, pr[:, :3], args.align)
    except ValueError as e:
        raise DatasetError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, report, {"alignment": args.align, "yaw_offset": al.transform.yaw,
                                "translation": [float(x) for x in al.transform.t]})
    print(f"APE rmse {report.rmse:.4f} m  mean {report.mean:.4f}  median {report.median:.4f}  max {report.max:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.dataset)
    truth = _truth(args.truth)
    if truth is None:
        raise DatasetError("ablation needs --truth")
    arms = tuple(args.arms) if args.arms else ABLATION_ARMS
    res = run_ablation(cfg, ds, truth, arms)
    rows = [(arm, r.report.rmse, r.report.mean, r.report.max, r.run_log["control_points"]) for arm, r in res.items()]
    if args.baselines:
        for name, poses in run_baselines(cfg, ds, res["full"].estimate.ekf).items():
            rep = ape_of(poses, truth, cfg.output.rate, cfg.output.alignment)
            rows.append((name, rep.rmse, rep.mean, rep.max, 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["arm,rmse,mean,max,control_points"] + [f"{a},{r:.9f},{m:.9f},{x:.9f},{n}" for a, r, m, x, n in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    for a, r, *_ in rows:
        print(f"{a:16s} {r:.4f}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _config(args)
    if args.out:
        save_config(args.out, cfg)
    else:
        sys.stdout.write(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctloc", description="Continuous-time UWB/IMU/odometer localization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a scenario into a dataset and truth file")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--truth-rate", type=float, default=100.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="estimate a trajectory from a dataset")
    r.add_argument("--config")
    r.add_argument("--dataset", required=True)
    r.add_argument("--truth")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="align an estimate to truth and report APE")
    e.add_argument("--estimate", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--align", choices=("se2", "se3", "none"), default="se2")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare estimator variants on one dataset")
    a.add_argument("--config")
    a.add_argument("--dataset", required=True)
    a.add_argument("--truth", required=True)
    a.add_argument("--arms", nargs="*", choices=ABLATION_ARMS)
    a.add_argument("--baselines", action="store_true", help="also score dead reckoning and the EKF baselines")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("config", help="print or write the effective configuration")
    c.add_argument("--config")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, PipelineError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
