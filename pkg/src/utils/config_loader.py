import json
import os
import re
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv

from src.pipeline import PipelineMode, SensorClass, StationKnowledge
from src.simulate import (
    BaseStation,
    DEFAULT_BOUNDING_BOX,
    FREQUENCY_PRESETS,
    OdometryNoiseModel,
    ScenarioConfig,
    TrajectorySpec,
    draw_station_noise,
)
from src.utils.errors import ConfigError

DEFAULT_CONFIG = {
    "out_dir": "runs",
    "log_level": "INFO",
    "log_dir": None,
    "jobs": 1,
}

ENV_OVERRIDES = {
    "TOA_SLAM_LOG_LEVEL": ("log_level", str),
    "TOA_SLAM_OUT_DIR": ("out_dir", str),
    "TOA_SLAM_JOBS": ("jobs", int),
}

SCENARIO_KEYS = {
    "name", "trajectory", "duration_s", "odometry_rate_hz", "toa_rate_hz", "stations", "frequency",
    "mode", "seed", "odometry", "bounding_box", "transform_init", "backend",
}
STATION_KEYS = {"id", "position", "sigma_m", "bias_m", "intervals"}
MODE_KEYS = {"sensor", "stations", "loop_closure"}
TRAJECTORY_KEYS = {"waypoints", "laps", "tum"}
ODOMETRY_KEYS = {"translation_sigma_m", "rotation_sigma_rad", "scale_drift", "random_walk_bias"}
BOX_KEYS = {"min", "max"}
TRANSFORM_KEYS = {"translation_m", "rotation_deg"}
BACKEND_KEYS = {
    "keyframe_stride", "window", "covisibility_inflation", "residual_threshold", "motion_threshold_m",
    "time_threshold_s", "keyframe_threshold", "min_transform_extent_m", "bias_prior_sigma_m",
    "station_init_min_measurements", "min_transform_spread_m", "residual_guard_keyframes",
}


def load_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Load application settings from config.json, then apply .env / environment overrides"""
    config = dict(DEFAULT_CONFIG)
    config_path = Path(path) if path else Path("config.json")
    if config_path.exists():
        try:
            config.update(json.loads(config_path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error loading configuration {config_path}: {e.msg} (column {e.colno})", e.lineno)

    load_dotenv()
    for variable, (key, cast) in ENV_OVERRIDES.items():
        value = os.getenv(variable)
        if value:
            try:
                config[key] = cast(value)
            except ValueError:
                raise ConfigError(f"{variable}={value!r} is not a valid {cast.__name__}")
    return config


def _key_line(text: Optional[str], key: str) -> Optional[int]:
    if not text:
        return None
    match = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, match.start()) + 1 if match else None


def _check_keys(section: Dict[str, Any], allowed: set, where: str, text: Optional[str]):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"Unknown key {key!r} in {where}", _key_line(text, key))


def _mode_from(section: Dict[str, Any], text: Optional[str]) -> PipelineMode:
    _check_keys(section, MODE_KEYS, "mode", text)
    try:
        return PipelineMode(sensor=SensorClass(section.get("sensor", "range_scaled")),
                            stations=StationKnowledge(section.get("stations", "known")),
                            loop_closure=bool(section.get("loop_closure", False)))
    except ValueError as e:
        raise ConfigError(f"Invalid mode: {e}", _key_line(text, "mode"))


def scenario_from_dict(data: Dict[str, Any], text: Optional[str] = None,
                       base_dir: Optional[Path] = None) -> ScenarioConfig:
    """Build a ScenarioConfig from the parsed key schema; unknown keys are errors."""
    _check_keys(data, SCENARIO_KEYS, "scenario", text)
    for key in ("trajectory", "stations", "toa_rate_hz", "mode", "seed"):
        if key not in data:
            raise ConfigError(f"Missing required key {key!r}")

    seed = int(data["seed"])
    frequency = data.get("frequency", "custom")
    if frequency not in (*FREQUENCY_PRESETS, "custom"):
        raise ConfigError(f"Unknown frequency {frequency!r}", _key_line(text, "frequency"))

    box = data.get("bounding_box", {"min": DEFAULT_BOUNDING_BOX[0], "max": DEFAULT_BOUNDING_BOX[1]})
    _check_keys(box, BOX_KEYS, "bounding_box", text)
    bounding_box = (tuple(box.get("min", DEFAULT_BOUNDING_BOX[0])), tuple(box.get("max", DEFAULT_BOUNDING_BOX[1])))

    trajectory = data["trajectory"]
    _check_keys(trajectory, TRAJECTORY_KEYS, "trajectory", text)
    tum_path = None
    if "tum" in trajectory:
        tum_path = Path(trajectory["tum"])
        if not tum_path.is_absolute() and base_dir is not None:
            tum_path = base_dir / tum_path
        spec = TrajectorySpec(bounding_box=bounding_box)
    elif "waypoints" in trajectory:
        spec = TrajectorySpec(waypoints=trajectory["waypoints"], laps=int(trajectory.get("laps", 1)),
                              bounding_box=bounding_box)
    else:
        raise ConfigError("trajectory needs 'waypoints' or 'tum'", _key_line(text, "trajectory"))

    stations_data = data["stations"]
    if not isinstance(stations_data, list) or not stations_data:
        raise ConfigError("stations must be a non-empty list", _key_line(text, "stations"))
    drawn = draw_station_noise(frequency, len(stations_data), seed) if frequency in FREQUENCY_PRESETS else None
    stations = []
    for k, entry in enumerate(stations_data):
        _check_keys(entry, STATION_KEYS, f"stations[{k}]", text)
        if "position" not in entry:
            raise ConfigError(f"stations[{k}] needs a position")
        if "sigma_m" not in entry and drawn is None:
            raise ConfigError(f"stations[{k}] needs sigma_m when frequency is custom")
        sigma, bias = drawn[k] if drawn else (None, 0.0)
        stations.append(BaseStation(
            station_id=str(entry.get("id", f"BS{k + 1}")),
            position=entry["position"],
            sigma_m=float(entry.get("sigma_m", sigma)),
            bias_m=float(entry.get("bias_m", bias)),
            intervals=entry.get("intervals"),
            noise_class=frequency,
        ))

    odometry = data.get("odometry", {})
    _check_keys(odometry, ODOMETRY_KEYS, "odometry", text)
    transform = data.get("transform_init", {})
    _check_keys(transform, TRANSFORM_KEYS, "transform_init", text)
    backend = data.get("backend", {})
    _check_keys(backend, BACKEND_KEYS, "backend", text)

    try:
        return ScenarioConfig(
            name=str(data.get("name", "scenario")),
            trajectory=spec,
            tum_path=tum_path,
            duration_s=float(data.get("duration_s", 120.0)),
            odometry_rate_hz=float(data.get("odometry_rate_hz", 100.0)),
            toa_rate_hz=float(data["toa_rate_hz"]),
            stations=stations,
            frequency=frequency,
            mode=_mode_from(data["mode"], text),
            seed=seed,
            odometry=OdometryNoiseModel(**odometry),
            transform_translation_m=float(transform.get("translation_m", 1.0)),
            transform_rotation_deg=float(transform.get("rotation_deg", 30.0)),
            backend=dict(backend),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid scenario value: {e}")


def read_scenario_data(source: Union[str, Path, Dict[str, Any]]) -> tuple:
    """Raw scenario dict, its text (for line numbers) and base directory.

    ``source`` may be a dict, a JSON file path, or a bundled preset name.
    """
    if isinstance(source, dict):
        return json.loads(json.dumps(source)), None, None
    path = Path(source)
    if not path.exists():
        from src.templates.scenario_templates import ScenarioTemplates
        if str(source) in ScenarioTemplates.TEMPLATES:
            return ScenarioTemplates.get_template(str(source)), None, None
        raise ConfigError(f"Scenario {source} is neither a file nor a bundled preset")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e.msg} (column {e.colno})", e.lineno)
    return data, text, path.parent


def load_scenario(source: Union[str, Path, Dict[str, Any]], seed: Optional[int] = None) -> ScenarioConfig:
    data, text, base_dir = read_scenario_data(source)
    if seed is not None:
        data["seed"] = seed
    return scenario_from_dict(data, text, base_dir)
