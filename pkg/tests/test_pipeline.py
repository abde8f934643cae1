import hashlib
import json

import numpy as np
import pytest

from ctloc.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from ctloc.io import Dataset, RunConfig, load_dataset, save_config, with_overrides
from ctloc.pipeline import (
    RECTANGLE_ANCHORS,
    NumericalError,
    PipelineError,
    ablation_config,
    ape_of,
    build_scenario,
    export_grid,
    matched_spacing,
    run_baselines,
    run_pipeline,
    simulate_scenario,
    to_dataset,
    truth_samples,
)
from ctloc.simulator import SensorNoiseConfig


def _short(**scene):
    return with_overrides(RunConfig(), scene={"duration": 30.0, **scene})


@pytest.fixture(scope="module")
def short_run():
    cfg = _short()
    sim = simulate_scenario(cfg, seed=1)
    ds, truth = to_dataset(sim), truth_samples(sim)
    return cfg, ds, truth, run_pipeline(cfg, ds, truth)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestScenario:
    def test_rectangle_has_at_most_two_anchors(self):
        sim = simulate_scenario(_short(), seed=0)
        s = sim.streams
        for t0 in np.arange(0.0, 29.0, 0.5):
            sel = (s.uwb_t >= t0) & (s.uwb_t < t0 + 0.5)
            assert len(set(s.uwb_anchor[sel])) <= 2

    def test_explicit_anchors_all_visible(self):
        cfg = _short(anchors={k: list(v) for k, v in RECTANGLE_ANCHORS.items()})
        _, scene, edges = build_scenario(cfg)
        assert edges is None and len(scene.anchors) == 4

    def test_named_scene(self):
        _, scene, _ = build_scenario(_short(name="office", path="square", side=[10.0, 10.0]))
        assert sorted(scene.anchors) == ["C0", "C1", "C2"]

    def test_unknown_scene(self):
        with pytest.raises(ValueError, match="unknown scene"):
            build_scenario(_short(name="moon"))

    def test_export_grid(self):
        t = export_grid(0.0, 1.0, 10.0)
        assert t.size == 11 and t[-1] == 1.0


class TestPipeline:
    def test_report_and_log(self, short_run):
        cfg, ds, truth, res = short_run
        assert res.report.rmse < 0.05
        assert res.t.size == res.pose.shape[0]
        assert np.allclose(np.diff(res.t), 0.1)
        assert res.run_log["windows"] == len(res.estimate.reports)
        assert res.run_log["window_ms_mean"] > 0

    def test_noise_free_full_visibility(self):
        cfg = with_overrides(_short(anchors={k: list(v) for k, v in RECTANGLE_ANCHORS.items()}),
                             noise=SensorNoiseConfig.zero(), range={"bias": 0.0})
        sim = simulate_scenario(cfg, seed=0)
        res = run_pipeline(cfg, to_dataset(sim), truth_samples(sim))
        assert res.report.rmse < 0.02

    def test_beats_baselines(self, short_run):
        cfg, ds, truth, res = short_run
        base = run_baselines(cfg, ds, res.estimate.ekf)
        assert set(base) == {"dead_reckoning", "discrete_ekf", "inertial_ekf"}
        assert res.report.rmse < ape_of(base["dead_reckoning"], truth).rmse

    def test_reproducible(self, short_run):
        cfg, ds, truth, res = short_run
        again = run_pipeline(cfg, ds, truth)
        assert np.array_equal(again.pose, res.pose)
        assert again.report.summary() == res.report.summary()

    def test_stage_errors(self, short_run):
        cfg, ds, truth, _ = short_run
        with pytest.raises(PipelineError, match=r"\[preprocessing\].*initial pose"):
            run_pipeline(cfg, Dataset(ds.streams, ds.anchors, None))
        with pytest.raises(PipelineError, match="unknown anchors"):
            run_pipeline(cfg, Dataset(ds.streams, type(ds.anchors)(), ds.initial))
        assert issubclass(NumericalError, PipelineError)

    def test_ablation_configs(self, short_run):
        cfg, *_, res = short_run
        h = matched_spacing(res.estimate)
        assert h > 0
        u = ablation_config(cfg, "uniform_knots", h)
        assert u.knots.mode == "uniform" and u.knots.uniform_spacing == h
        assert not ablation_config(cfg, "no_gate", h).gate.enabled
        assert not ablation_config(cfg, "no_va", h).va.enabled
        with pytest.raises(ValueError):
            ablation_config(cfg, "nothing")


@pytest.fixture(scope="module")
def cli_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_config(d / "cfg.yaml", _short(duration=20.0))
    return d


class TestCli:
    def test_simulate_run_eval(self, cli_dir):
        cfg = str(cli_dir / "cfg.yaml")
        assert main(["simulate", "--config", cfg, "--seed", "7", "--out", str(cli_dir / "sim")]) == EXIT_OK
        data = cli_dir / "sim" / "dataset.jsonl"
        before = _sha(data)
        assert main(["run", "--config", cfg, "--dataset", str(data), "--truth", str(cli_dir / "sim" / "truth.csv"),
                     "--out", str(cli_dir / "run")]) == EXIT_OK
        assert _sha(data) == before  # input untouched
        rep = json.loads((cli_dir / "run" / "report.json").read_text())
        assert rep["rmse"] < 0.05
        assert (cli_dir / "run" / "errors.csv").exists() and (cli_dir / "run" / "cdf.csv").exists()
        assert main(["eval", "--estimate", str(cli_dir / "run" / "estimate.csv"),
                     "--truth", str(cli_dir / "sim" / "truth.csv"), "--out", str(cli_dir / "ev")]) == EXIT_OK
        ev = json.loads((cli_dir / "ev" / "report.json").read_text())
        assert ev["rmse"] == pytest.approx(rep["rmse"], abs=1e-6)

    def test_simulate_deterministic(self, cli_dir):
        cfg = str(cli_dir / "cfg.yaml")
        for name in ("a", "b"):
            assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(cli_dir / name)]) == EXIT_OK
        for f in ("dataset.jsonl", "truth.csv"):
            assert _sha(cli_dir / "a" / f) == _sha(cli_dir / "b" / f)
        assert main(["simulate", "--config", cfg, "--seed", "4", "--out", str(cli_dir / "c")]) == EXIT_OK
        assert _sha(cli_dir / "a" / "dataset.jsonl") != _sha(cli_dir / "c" / "dataset.jsonl")

    def test_ablate(self, cli_dir):
        cfg = str(cli_dir / "cfg.yaml")
        main(["simulate", "--config", cfg, "--seed", "2", "--out", str(cli_dir / "abl_sim")])
        assert main(["ablate", "--config", cfg, "--dataset", str(cli_dir / "abl_sim" / "dataset.jsonl"),
                     "--truth", str(cli_dir / "abl_sim" / "truth.csv"), "--arms", "full", "no_va",
                     "--baselines", "--out", str(cli_dir / "abl")]) == EXIT_OK
        rows = (cli_dir / "abl" / "ablation.csv").read_text().splitlines()
        assert rows[0] == "arm,rmse,mean,max,control_points"
        assert [r.split(",")[0] for r in rows[1:]] == ["full", "no_va", "dead_reckoning", "discrete_ekf",
                                                         "inertial_ekf"]

    def test_config_error_exit(self, tmp_path, capsys):
        (tmp_path / "bad.yaml").write_text("gate:\n  lambda_min: 9\n")
        assert main(["config", "--config", str(tmp_path / "bad.yaml")]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err
        (tmp_path / "bad2.yaml").write_text("scene:\n  profile: warp\n")
        assert main(["simulate", "--config", str(tmp_path / "bad2.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_data_error_exit(self, tmp_path):
        (tmp_path / "d.jsonl").write_text('{"type": "radar", "t": 0}\n')
        assert main(["run", "--dataset", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "o")]) == EXIT_DATA
        assert main(["run", "--dataset", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_numerical_failure_exit(self, tmp_path, monkeypatch):
        import ctloc.cli as cli

        def boom(*a, **k):
            raise NumericalError("backend_optimizer", "estimate is non-finite")
        (tmp_path / "d.jsonl").write_text("")
        monkeypatch.setattr(cli, "run_pipeline", boom)
        assert main(["run", "--dataset", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC

    def test_print_config(self, capsys):
        assert main(["config"]) == EXIT_OK
        assert "thr: 10.85" in capsys.readouterr().out
