import json

import numpy as np
import pandas as pd
import pytest

from src.experiment_manager import ExperimentManager, RunManifest, _apply_axis, parse_axes
from src.geometry import RigidTransform
from src.simulate import GDOP_LAYOUTS
from src.streams import Trajectory, read_toa_csv, read_tum, write_tum
from src.utils.errors import ConfigError


def test_simulate_writes_deterministic_artifacts(tmp_path, small_scenario_file):
    manager = ExperimentManager(tmp_path / "out")
    first = manager.simulate(small_scenario_file, run_name="a")
    second = manager.simulate(small_scenario_file, run_name="b")
    assert first.missing() == []
    for key in ("ground_truth", "odometry", "toa"):
        assert first.path(key).read_bytes() == second.path(key).read_bytes()

    ground_truth = read_tum(first.path("ground_truth"))
    assert len(ground_truth) == 1001
    toa = read_toa_csv(first.path("toa"))
    assert len(toa) == 4 * 101
    loaded = RunManifest.load(first.path("scenario").parent)
    assert loaded.seed == 0
    assert loaded.artifacts == first.artifacts


def test_simulate_seed_override_changes_streams(tmp_path, small_scenario):
    manager = ExperimentManager(tmp_path)
    base = manager.simulate(small_scenario, run_name="seed0")
    other = manager.simulate(small_scenario, seed=5, run_name="seed5")
    assert other.seed == 5
    assert base.path("toa").read_bytes() != other.path("toa").read_bytes()
    assert base.path("ground_truth").read_bytes() == other.path("ground_truth").read_bytes()


def test_run_without_toa_reports_no_global_error(tmp_path, small_scenario):
    manager = ExperimentManager(tmp_path)
    manifest = manager.simulate(small_scenario, run_name="run")
    manifest, report = manager.run(manifest.out_dir, no_toa=True)
    assert report.global_ate is None
    assert report.baseline is None
    frame = pd.read_csv(manifest.path("report"), keep_default_na=False)
    assert frame.loc[0, "global_ate"] == "N/A"
    assert frame.loc[0, "mode"] == "range_scaled/known/no-lc"
    summary = json.loads(manifest.path("summary").read_text())
    assert summary["toa_factors"] == 0


def test_run_with_toa_writes_estimates_and_report(tmp_path, small_scenario):
    manager = ExperimentManager(tmp_path)
    manifest = manager.simulate(small_scenario, run_name="run")
    manifest, report = manager.run(manifest.out_dir)
    assert manifest.missing() == []
    assert report.global_ate is not None
    assert report.baseline == "no_toa"
    assert report.gdop_mean is not None
    local = read_tum(manifest.path("estimate_local"))
    assert len(local) == 101
    saved = RunManifest.load(manifest.out_dir)
    assert "report" in saved.artifacts


def test_run_rejects_incomplete_manifest(tmp_path, small_scenario):
    manager = ExperimentManager(tmp_path)
    manifest = manager.simulate(small_scenario, run_name="run")
    manifest.path("toa").unlink()
    with pytest.raises(ConfigError):
        manager.run(manifest.out_dir)
    with pytest.raises(ConfigError):
        manager.run(tmp_path / "nowhere")


def test_run_dir_must_stay_inside_output(tmp_path, small_scenario):
    manager = ExperimentManager(tmp_path / "out")
    with pytest.raises(ConfigError):
        manager.simulate(small_scenario, run_name="../escape")


def test_evaluate_tum_files(tmp_path):
    t = np.linspace(0.0, 4.0 * np.pi, 50)
    points = np.column_stack([np.cos(t), np.sin(t), 0.1 * t])
    reference = Trajectory(np.arange(50) * 0.1, [RigidTransform.from_translation(p) for p in points])
    shifted = Trajectory(reference.timestamps, [RigidTransform.from_translation(p + [0.5, 0.0, 0.0])
                                                for p in points])
    write_tum(tmp_path / "ref.tum", reference)
    write_tum(tmp_path / "est.tum", shifted)
    manager = ExperimentManager(tmp_path)
    assert manager.evaluate(tmp_path / "est.tum", tmp_path / "ref.tum", "none").rmse == pytest.approx(0.5, abs=1e-6)
    assert manager.evaluate(tmp_path / "est.tum", tmp_path / "ref.tum", "se3").rmse < 1e-6


def test_gdop_ranks_layouts(tmp_path, small_scenario):
    manager = ExperimentManager(tmp_path)
    configs = []
    for name in ("tetrahedral", "clustered"):
        data = _apply_axis(small_scenario, "layout", name)
        data["name"] = name
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(data))
        configs.append(path)
    ranking = manager.gdop(configs)
    assert ranking["layout"].tolist() == ["tetrahedral", "clustered"]
    series = pd.read_csv(tmp_path / "gdop_series.csv")
    assert list(series.columns) == ["timestamp", "tetrahedral", "clustered"]
    assert len(series) == 1001
    assert (tmp_path / "gdop_ranking.csv").exists()


def test_apply_axis_and_parse_axes(small_scenario):
    layout = _apply_axis(small_scenario, "layout", "diamond")
    assert [s["position"] for s in layout["stations"]] == [list(p) for p in GDOP_LAYOUTS["diamond"].values()]
    assert layout["frequency"] == "78GHz"
    assert small_scenario["stations"][0]["sigma_m"] == 0.15

    frequency = _apply_axis(small_scenario, "frequency", "28GHz")
    assert "sigma_m" not in frequency["stations"][0]
    assert _apply_axis(small_scenario, "loop_closure", "on")["mode"]["loop_closure"] is True
    assert _apply_axis(small_scenario, "sensor", "monocular")["mode"]["sensor"] == "monocular"
    with pytest.raises(ConfigError):
        _apply_axis(small_scenario, "layout", "pyramid")

    assert parse_axes(["seed=0,1,2", "frequency=28GHz"]) == {"seed": ["0", "1", "2"], "frequency": ["28GHz"]}
    with pytest.raises(ConfigError):
        parse_axes(["seed"])
    with pytest.raises(ConfigError):
        parse_axes(["colour=red"])


def test_sweep_over_seeds_reports_means(tmp_path, small_scenario_file):
    manager = ExperimentManager(tmp_path / "out")
    summary = manager.sweep(small_scenario_file, {"seed": ["0", "1"]}, jobs=2)
    cells = pd.read_csv(tmp_path / "out" / "sweep.csv")
    assert len(cells) == 2
    assert not cells["failed"].any()
    assert summary["axis"].tolist() == ["seed", "seed"]
    assert summary["local_ate_se3"].mean() == pytest.approx(cells["local_ate_se3"].mean())
    assert (tmp_path / "out" / "sweep" / "seed-0" / "report.csv").exists()


def test_repeated_runs_are_byte_identical(tmp_path, small_scenario):
    manager = ExperimentManager(tmp_path)
    runs = []
    for name in ("first", "second"):
        manifest = manager.simulate(small_scenario, run_name=name)
        manifest, _ = manager.run(manifest.out_dir)
        runs.append(manifest)
    for key in ("estimate_local", "estimate_global", "summary", "report"):
        assert runs[0].path(key).read_bytes() == runs[1].path(key).read_bytes()


def test_run_records_any_backend_error(tmp_path, small_scenario, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("bad window")

    manager = ExperimentManager(tmp_path)
    manifest = manager.simulate(small_scenario, run_name="run")
    monkeypatch.setattr("src.experiment_manager.run_backend", broken)
    with pytest.raises(ValueError):
        manager.run(manifest.out_dir)
    record = json.loads((tmp_path / "run" / "error.json").read_text())
    assert record == {"error": "ValueError", "message": "bad window"}


def test_sweep_keeps_going_after_a_failed_cell(tmp_path, small_scenario_file, monkeypatch):
    original = ExperimentManager.run

    def flaky(self, manifest_path, *args, **kwargs):
        if "seed-1" in str(manifest_path):
            raise RuntimeError("solver crashed")
        return original(self, manifest_path, *args, **kwargs)

    monkeypatch.setattr(ExperimentManager, "run", flaky)
    manager = ExperimentManager(tmp_path / "out")
    manager.sweep(small_scenario_file, {"seed": ["0", "1"]})
    cells = pd.read_csv(tmp_path / "out" / "sweep.csv")
    assert cells["failed"].tolist() == [False, True]
    assert cells.loc[1, "error"] == "RuntimeError: solver crashed"
