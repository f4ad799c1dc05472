import json

import pytest

from src.pipeline import SensorClass, StationKnowledge
from src.simulate import FREQUENCY_PRESETS
from src.templates.scenario_templates import ScenarioTemplates
from src.utils.config_loader import load_config, load_scenario, scenario_from_dict
from src.utils.errors import ConfigError


def test_scenario_from_dict(small_scenario):
    scenario = scenario_from_dict(small_scenario)
    assert scenario.name == "small"
    assert scenario.duration_s == 10.0
    assert [s.station_id for s in scenario.stations] == ["BS1", "BS2", "BS3", "BS4"]
    assert scenario.stations[0].sigma_m == 0.15
    assert scenario.mode.sensor == SensorClass.RANGE_SCALED
    assert scenario.mode.stations == StationKnowledge.KNOWN
    assert scenario.transform_translation_m == 0.2
    assert scenario.odometry.translation_sigma_m == 0.002


def test_unknown_key_reports_its_line(tmp_path, small_scenario):
    small_scenario["mode"]["bogus_flag"] = True
    text = json.dumps(small_scenario, indent=2)
    path = tmp_path / "bad.json"
    path.write_text(text)
    expected = text.splitlines().index('    "bogus_flag": true') + 1
    with pytest.raises(ConfigError) as info:
        load_scenario(path)
    assert info.value.line == expected
    assert "bogus_flag" in str(info.value)


def test_json_syntax_error_reports_its_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "seed": 1,\n  "mode": {,\n}\n')
    with pytest.raises(ConfigError) as info:
        load_scenario(path)
    assert info.value.line == 3


@pytest.mark.parametrize("key", ["trajectory", "stations", "toa_rate_hz", "mode", "seed"])
def test_missing_required_key(small_scenario, key):
    del small_scenario[key]
    with pytest.raises(ConfigError):
        scenario_from_dict(small_scenario)


def test_invalid_values_are_config_errors(small_scenario):
    bad_mode = json.loads(json.dumps(small_scenario))
    bad_mode["mode"]["sensor"] = "stereo"
    with pytest.raises(ConfigError):
        scenario_from_dict(bad_mode)

    no_sigma = json.loads(json.dumps(small_scenario))
    del no_sigma["stations"][0]["sigma_m"]
    with pytest.raises(ConfigError):
        scenario_from_dict(no_sigma)

    bad_frequency = json.loads(json.dumps(small_scenario))
    bad_frequency["frequency"] = "60GHz"
    with pytest.raises(ConfigError):
        scenario_from_dict(bad_frequency)


def test_frequency_preset_draws_station_noise(small_scenario):
    small_scenario["frequency"] = "78GHz"
    for station in small_scenario["stations"]:
        del station["sigma_m"]
        del station["bias_m"]
    first = scenario_from_dict(small_scenario)
    again = scenario_from_dict(small_scenario)
    envelope = FREQUENCY_PRESETS["78GHz"]
    for a, b in zip(first.stations, again.stations):
        assert a.sigma_m == b.sigma_m
        assert envelope.sigma_m[0] <= a.sigma_m <= envelope.sigma_m[1]
        assert envelope.bias_m[0] <= a.bias_m <= envelope.bias_m[1]
        assert a.noise_class == "78GHz"


def test_every_preset_loads():
    for name in ScenarioTemplates.list_templates():
        scenario = load_scenario(name)
        assert scenario.stations
        assert scenario.seed == 0


def test_preset_details():
    uwb = load_scenario("uwbvo_mh", seed=4)
    assert uwb.seed == 4
    assert uwb.toa_rate_hz == 5.0
    assert len(uwb.stations) == 1
    assert uwb.stations[0].sigma_m == 0.05
    assert uwb.mode.sensor == SensorClass.MONOCULAR

    sequential = load_scenario("sequential_3bs")
    assert [s.intervals for s in sequential.stations] == [[(10.0, 40.0)], [(50.0, 70.0)], [(80.0, 100.0)]]
    assert sequential.mode.stations == StationKnowledge.UNKNOWN

    with pytest.raises(ConfigError):
        load_scenario("no_such_preset")
    with pytest.raises(ConfigError):
        ScenarioTemplates.get_template("no_such_preset")


def test_load_config_defaults_and_overrides(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for variable in ("TOA_SLAM_LOG_LEVEL", "TOA_SLAM_OUT_DIR", "TOA_SLAM_JOBS"):
        monkeypatch.delenv(variable, raising=False)
    assert load_config()["out_dir"] == "runs"

    (tmp_path / "config.json").write_text(json.dumps({"out_dir": "results", "jobs": 2}))
    config = load_config()
    assert config["out_dir"] == "results"
    assert config["jobs"] == 2

    monkeypatch.setenv("TOA_SLAM_JOBS", "4")
    monkeypatch.setenv("TOA_SLAM_LOG_LEVEL", "DEBUG")
    config = load_config()
    assert config["jobs"] == 4
    assert config["log_level"] == "DEBUG"

    monkeypatch.setenv("TOA_SLAM_JOBS", "many")
    with pytest.raises(ConfigError):
        load_config()


def test_load_config_rejects_broken_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text('{\n  "jobs": \n}')
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line == 3
