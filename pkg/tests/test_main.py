import json
import os

import pandas as pd
import pytest

from src.experiment_manager import ExperimentManager
from src.main import EXIT_OK, EXIT_SCENARIO_FAILURE, EXIT_USAGE, build_parser, log_directory, main
from src.utils.errors import ConfigError
from src.utils.logger import setup_logger


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for variable in ("TOA_SLAM_LOG_LEVEL", "TOA_SLAM_OUT_DIR", "TOA_SLAM_JOBS"):
        monkeypatch.delenv(variable, raising=False)
    yield
    setup_logger(None)


def test_parser_accepts_global_flags_before_subcommand():
    args = build_parser().parse_args(["--seed", "3", "--out", "x", "run", "--mode", "monocular", "--no-toa"])
    assert args.seed == 3
    assert args.command == "run"
    assert args.mode == "monocular"
    assert args.no_toa


def test_list_presets(capsys):
    assert main(["--list-presets"]) == EXIT_OK
    assert "aerolab_78ghz" in capsys.readouterr().out


def test_missing_command_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_simulate_then_run(tmp_path, small_scenario_file):
    out = tmp_path / "out"
    assert main(["--out", str(out), "--config", str(small_scenario_file), "simulate"]) == EXIT_OK
    assert (out / "manifest.json").exists()
    assert main(["--out", str(out), "run", "--no-toa"]) == EXIT_OK
    report = pd.read_csv(out / "report.csv", keep_default_na=False)
    assert report.loc[0, "global_ate"] == "N/A"


def test_usage_errors_exit_two(tmp_path):
    out = str(tmp_path / "out")
    assert main(["--out", out, "simulate"]) == EXIT_USAGE
    assert main(["--out", out, "--config", "no_such_preset", "simulate"]) == EXIT_USAGE
    assert main(["--out", out, "run"]) == EXIT_USAGE
    assert main(["--out", out, "--config", "aerolab_28ghz", "sweep", "--axis", "colour=red"]) == EXIT_USAGE


def test_scenario_failure_exits_one(tmp_path):
    (tmp_path / "a.tum").write_text("0.0 0 0 0 0 0 0 1\n0.1 1 0 0 0 0 0 1\n")
    (tmp_path / "b.tum").write_text("5.0 0 0 0 0 0 0 1\n5.1 1 0 0 0 0 0 1\n")
    assert main(["--out", str(tmp_path / "out"), "eval", str(tmp_path / "a.tum"), str(tmp_path / "b.tum")]) \
        == EXIT_SCENARIO_FAILURE


def test_cli_writes_nothing_outside_out(tmp_path, monkeypatch, small_scenario_file):
    work = tmp_path / "work"
    work.mkdir()
    (work / "config.json").write_text(json.dumps({"log_dir": "logs"}))
    monkeypatch.chdir(work)
    out = tmp_path / "out"
    assert main(["--config", str(small_scenario_file), "--out", str(out), "simulate"]) == EXIT_OK
    assert os.listdir(work) == ["config.json"]
    assert (out / "logs" / "toa_slam.log").exists()
    assert (out / "manifest.json").exists()


def test_log_dir_cannot_escape_out(tmp_path, monkeypatch, small_scenario_file):
    (tmp_path / "config.json").write_text(json.dumps({"log_dir": "../logs"}))
    out = tmp_path / "nested" / "out"
    assert main(["--config", str(small_scenario_file), "--out", str(out), "simulate"]) == EXIT_USAGE
    assert not (tmp_path / "nested" / "logs").exists()
    assert log_directory(out, None) is None
    assert log_directory(out, "logs") == (out / "logs").resolve()
    with pytest.raises(ConfigError):
        log_directory(out, "/var/log")


def test_unexpected_errors_are_recorded(tmp_path, monkeypatch, small_scenario_file, capsys):
    def broken(self, *args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(ExperimentManager, "simulate", broken)
    out = tmp_path / "out"
    assert main(["--config", str(small_scenario_file), "--out", str(out), "simulate"]) == EXIT_SCENARIO_FAILURE
    assert "RuntimeError: disk on fire" in capsys.readouterr().out
    record = json.loads((out / "error.json").read_text())
    assert record == {"error": "RuntimeError", "message": "disk on fire"}
