import copy
from typing import Any, Dict

from src.simulate import AEROLAB_AL01, AEROLAB_POSITIONS, DEFAULT_WAYPOINTS, GDOP_LAYOUTS
from src.utils.errors import ConfigError

# sweeps the lower half of the flight box twice at two heights
BOX_FILLING_WAYPOINTS = [
    [-2.4, -2.4, 0.6], [2.4, -2.4, 0.6], [2.4, -0.8, 1.2], [-2.4, -0.8, 1.2],
    [-2.4, 0.8, 1.8], [2.4, 0.8, 1.8], [2.4, 2.4, 2.4], [-2.4, 2.4, 2.4],
    [-2.4, -2.4, 0.6],
]

AEROLAB_ODOMETRY = {
    "translation_sigma_m": 0.002,
    "rotation_sigma_rad": 0.0005,
    "scale_drift": 1.0,
    "random_walk_bias": True,
}


def _stations(positions: Dict[str, tuple], intervals: Dict[str, list] = None) -> list:
    stations = []
    for station_id, position in positions.items():
        entry = {"id": station_id, "position": list(position)}
        if intervals is not None:
            entry["intervals"] = intervals.get(station_id, [])
        stations.append(entry)
    return stations


def _aerolab(name: str, description: str, frequency: str, **overrides) -> Dict[str, Any]:
    config = {
        "name": name,
        "trajectory": {"waypoints": [list(w) for w in DEFAULT_WAYPOINTS], "laps": 4},
        "duration_s": 120.0,
        "odometry_rate_hz": 20.0,
        "toa_rate_hz": 10.0,
        "frequency": frequency,
        "stations": _stations(AEROLAB_POSITIONS),
        "mode": {"sensor": "range_scaled", "stations": "known", "loop_closure": False},
        "odometry": dict(AEROLAB_ODOMETRY),
        "seed": 0,
    }
    config.update(overrides)
    return {"name": name, "description": description, "config": config}


def _al01_stations(frequency: str) -> list:
    stations = _stations(AEROLAB_POSITIONS)
    for entry in stations:
        sigma, bias = AEROLAB_AL01[frequency][entry["id"]]
        entry["sigma_m"] = sigma
        entry["bias_m"] = bias
    return stations


def _layout(name: str) -> Dict[str, Any]:
    return _aerolab(
        name, f"{name.replace('_', '-').title()} station layout over a box-filling path",
        "78GHz",
        trajectory={"waypoints": BOX_FILLING_WAYPOINTS, "laps": 2},
        stations=_stations(GDOP_LAYOUTS[name]),
    )


class ScenarioTemplates:
    TEMPLATES = {
        "aerolab_28ghz": _aerolab("aerolab_28ghz", "Aerolab stations, 28 GHz noise envelope", "28GHz"),
        "aerolab_78ghz": _aerolab("aerolab_78ghz", "Aerolab stations, 78 GHz noise envelope", "78GHz"),
        "aerolab_78ghz_al01": _aerolab("aerolab_78ghz_al01", "Aerolab stations, measured 78 GHz AL01 statistics",
                                       "78GHz", stations=_al01_stations("78GHz")),
        "aerolab_mono": _aerolab(
            "aerolab_mono", "Monocular odometry at half scale, Aerolab stations, 78 GHz", "78GHz",
            mode={"sensor": "monocular", "stations": "known", "loop_closure": False},
            odometry=dict(AEROLAB_ODOMETRY, scale_drift=0.5)),
        "sequential_3bs": _aerolab(
            "sequential_3bs", "One visible station at a time (BS1 10-40 s, BS2 50-70 s, BS3 80-100 s)", "78GHz",
            stations=_stations({k: AEROLAB_POSITIONS[k] for k in ("BS1", "BS2", "BS3")},
                               {"BS1": [[10.0, 40.0]], "BS2": [[50.0, 70.0]], "BS3": [[80.0, 100.0]]}),
            mode={"sensor": "monocular", "stations": "unknown", "loop_closure": False}),
        "sequential_mh": _aerolab(
            "sequential_mh", "Two sequential stations (BS1 20-55 s, BS2 60-100 s)", "78GHz",
            stations=_stations({k: AEROLAB_POSITIONS[k] for k in ("BS1", "BS2")},
                               {"BS1": [[20.0, 55.0]], "BS2": [[60.0, 100.0]]}),
            mode={"sensor": "monocular", "stations": "unknown", "loop_closure": False}),
        "uwbvo_mh": _aerolab(
            "uwbvo_mh", "Single station at (10, 10, 10), 5 Hz, 5 cm noise", "custom",
            toa_rate_hz=5.0,
            stations=[{"id": "BS1", "position": [10.0, 10.0, 10.0], "sigma_m": 0.05, "bias_m": 0.0}],
            mode={"sensor": "monocular", "stations": "unknown", "loop_closure": False}),
        **{name: _layout(name) for name in GDOP_LAYOUTS},
    }

    @classmethod
    def list_templates(cls) -> Dict[str, str]:
        """List available scenario presets"""
        return {name: template["description"] for name, template in cls.TEMPLATES.items()}

    @classmethod
    def get_template(cls, template_name: str) -> Dict[str, Any]:
        """Scenario config dict for a preset; callers may modify the copy"""
        if template_name not in cls.TEMPLATES:
            raise ConfigError(f"Template '{template_name}' not found")
        return copy.deepcopy(cls.TEMPLATES[template_name]["config"])
