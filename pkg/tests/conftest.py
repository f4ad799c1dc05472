import json

import pytest

from src.simulate import AEROLAB_POSITIONS


@pytest.fixture
def small_scenario():
    """A ten-second Aerolab flight that keeps back-end runs fast."""
    return {
        "name": "small",
        "trajectory": {"waypoints": [[-2.0, -2.0, 1.0], [2.0, -2.0, 1.6], [2.0, 2.0, 2.2],
                                     [-2.0, 2.0, 1.4], [-2.0, -2.0, 1.0]], "laps": 1},
        "duration_s": 10.0,
        "odometry_rate_hz": 100.0,
        "toa_rate_hz": 10.0,
        "frequency": "custom",
        "stations": [{"id": name, "position": list(position), "sigma_m": 0.15, "bias_m": 0.0}
                     for name, position in AEROLAB_POSITIONS.items()],
        "mode": {"sensor": "range_scaled", "stations": "known", "loop_closure": False},
        "odometry": {"translation_sigma_m": 0.002, "rotation_sigma_rad": 0.0005},
        "transform_init": {"translation_m": 0.2, "rotation_deg": 5.0},
        "seed": 0,
    }


@pytest.fixture
def small_scenario_file(tmp_path, small_scenario):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_scenario, indent=2))
    return path
