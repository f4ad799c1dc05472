import numpy as np
import pytest

from src.geometry import RigidTransform
from src.pipeline import PipelineMode, StationKnowledge
from src.simulate import (
    AEROLAB_AL01,
    AEROLAB_POSITIONS,
    FREQUENCY_PRESETS,
    BaseStation,
    OdometryNoiseModel,
    ScenarioConfig,
    TrajectorySpec,
    backend_config,
    corrupt_odometry,
    draw_station_noise,
    generate_trajectory,
    perturbed_transform,
    simulate_loop_closures,
    simulate_scenario,
    simulate_toa,
    true_transform,
)
from src.streams import Trajectory, integrate_odometry
from src.utils.errors import ConfigError, TooFewWaypoints


def straight_line(count, step=0.05):
    timestamps = np.arange(count) * 0.01
    poses = [RigidTransform.from_translation([k * step, 0.0, 1.0]) for k in range(count)]
    return Trajectory(timestamps, poses)


def static_trajectory(duration_s, position=(0.0, 0.0, 1.0)):
    pose = RigidTransform.from_translation(position)
    return Trajectory(np.array([0.0, duration_s]), [pose, pose])


def small_scenario(seed=0):
    stations = [BaseStation(name, position, sigma_m=0.15, bias_m=-0.02)
                for name, position in AEROLAB_POSITIONS.items()]
    return ScenarioConfig(
        name="small",
        trajectory=TrajectorySpec(laps=1),
        duration_s=10.0,
        stations=stations,
        seed=seed,
        odometry=OdometryNoiseModel(translation_sigma_m=0.002, rotation_sigma_rad=0.0005),
    )


def test_two_identical_waypoints_give_constant_pose():
    trajectory = generate_trajectory(TrajectorySpec(waypoints=[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
                                                    duration_s=2.0, rate_hz=10.0))
    assert len(trajectory) == 21
    assert np.allclose(trajectory.positions, [0.0, 0.0, 1.0])


def test_closed_waypoints_give_closed_path():
    trajectory = generate_trajectory(TrajectorySpec(duration_s=60.0, rate_hz=100.0))
    assert len(trajectory) == 6001
    assert trajectory.timestamps[0] == 0.0
    assert np.allclose(trajectory.positions[0], trajectory.positions[-1], atol=1e-9)


def test_trajectory_velocity_is_continuous_and_in_box():
    trajectory = generate_trajectory(TrajectorySpec(laps=2, duration_s=60.0, rate_hz=100.0))
    velocity = np.diff(trajectory.positions, axis=0) * 100.0
    speed = np.linalg.norm(velocity, axis=1)
    assert np.max(np.linalg.norm(np.diff(velocity, axis=0), axis=1)) < 0.01
    assert np.mean(speed) > 0.1
    assert np.all(trajectory.positions >= [-2.5, -2.5, 0.0])
    assert np.all(trajectory.positions <= [2.5, 2.5, 5.0])
    norms = [np.linalg.norm(p.quaternion) for p in trajectory.poses]
    assert np.allclose(norms, 1.0)


def test_waypoint_errors():
    with pytest.raises(TooFewWaypoints):
        generate_trajectory(TrajectorySpec(waypoints=[[0.0, 0.0, 1.0]]))
    with pytest.raises(ConfigError):
        generate_trajectory(TrajectorySpec(waypoints=[[0.0, 0.0, 1.0], [9.0, 0.0, 1.0]]))


def test_noiseless_odometry_reproduces_ground_truth():
    ground_truth = generate_trajectory(TrajectorySpec(duration_s=10.0, rate_hz=100.0))
    increments = corrupt_odometry(ground_truth, OdometryNoiseModel(), seed=0)
    odometry = integrate_odometry(increments, 0.0, ground_truth.poses[0])
    assert np.allclose(odometry.timestamps, ground_truth.timestamps)
    assert np.max(np.linalg.norm(odometry.positions - ground_truth.positions, axis=1)) < 1e-9


def test_scale_drift_shrinks_path_length():
    ground_truth = generate_trajectory(TrajectorySpec(duration_s=20.0, rate_hz=50.0))
    increments = corrupt_odometry(ground_truth, OdometryNoiseModel(scale_drift=0.5), seed=0)
    odometry = integrate_odometry(increments, 0.0)
    assert odometry.path_length() == pytest.approx(0.5 * ground_truth.path_length(), rel=1e-9)


def test_translation_noise_grows_with_square_root_of_steps():
    sigma = 0.01
    model = OdometryNoiseModel(translation_sigma_m=sigma)
    for count in (101, 401):
        ground_truth = straight_line(count)
        errors = []
        for seed in range(20):
            odometry = integrate_odometry(corrupt_odometry(ground_truth, model, seed), 0.0, ground_truth.poses[0])
            errors.append(odometry.positions[-1] - ground_truth.positions[-1])
        mean_square = np.mean(np.sum(np.square(errors), axis=1))
        expected = 3 * (count - 1) * sigma ** 2
        assert 0.5 < mean_square / expected < 1.6


def test_odometry_noise_is_seeded():
    ground_truth = straight_line(50)
    model = OdometryNoiseModel(translation_sigma_m=0.01, rotation_sigma_rad=0.001)
    first = corrupt_odometry(ground_truth, model, seed=3)
    again = corrupt_odometry(ground_truth, model, seed=3)
    other = corrupt_odometry(ground_truth, model, seed=4)
    assert all(np.allclose(a.delta.as_matrix(), b.delta.as_matrix()) for a, b in zip(first, again))
    assert not all(np.allclose(a.delta.as_matrix(), b.delta.as_matrix()) for a, b in zip(first, other))


def test_near_noiseless_ranges_match_geometry():
    ground_truth = straight_line(101)
    station = BaseStation("BS1", (3.0, 4.0, 2.0), sigma_m=1e-9)
    measurements = simulate_toa(ground_truth, [station], rate_hz=10.0, seed=0)
    assert len(measurements) == 11
    for m in measurements:
        receiver = np.array([m.timestamp * 5.0, 0.0, 1.0])
        assert abs(m.range_m - np.linalg.norm(receiver - station.position)) < 1e-6


def test_measured_78ghz_statistics_are_reproduced():
    sigma, bias = AEROLAB_AL01["78GHz"]["BS4"]
    station = BaseStation("BS4", (10.0, 0.0, 1.0), sigma_m=sigma, bias_m=bias)
    measurements = simulate_toa(static_trajectory(1000.0), [station], rate_hz=10.0, seed=7)
    assert len(measurements) == 10001
    errors = np.array([m.range_m for m in measurements]) - 10.0
    assert abs(np.mean(errors) - bias) < 0.006
    assert abs(np.std(errors) / sigma - 1.0) < 0.05


def test_uwb_rate_and_noise():
    station = BaseStation("BS1", (10.0, 10.0, 10.0), sigma_m=0.05)
    measurements = simulate_toa(static_trajectory(10.0), [station], rate_hz=5.0, seed=1)
    assert len(measurements) == 51
    assert np.allclose(np.diff([m.timestamp for m in measurements]), 0.2)
    truth = np.linalg.norm(np.array([10.0, 10.0, 9.0]))
    assert np.max(np.abs([m.range_m - truth for m in measurements])) < 0.3


def test_visibility_intervals_are_respected():
    stations = [
        BaseStation("BS1", (5.0, 0.0, 2.0), sigma_m=0.1, intervals=[(1.0, 3.0), (5.0, 6.0)]),
        BaseStation("BS2", (-5.0, 0.0, 2.0), sigma_m=0.1, intervals=[]),
        BaseStation("BS3", (0.0, 5.0, 2.0), sigma_m=0.1),
    ]
    measurements = simulate_toa(static_trajectory(10.0), stations, rate_hz=10.0, seed=2)
    first = [m.timestamp for m in measurements if m.station_id == "BS1"]
    assert all(1.0 <= t < 3.0 or 5.0 <= t < 6.0 for t in first)
    assert len(first) == 30
    assert not any(m.station_id == "BS2" for m in measurements)
    assert sum(m.station_id == "BS3" for m in measurements) == 101
    keys = [(m.timestamp, m.station_id) for m in measurements]
    assert keys == sorted(keys)


def test_station_validation():
    with pytest.raises(ConfigError):
        BaseStation("BS1", (0.0, 0.0, 0.0), sigma_m=0.0)
    with pytest.raises(ConfigError):
        BaseStation("BS1", (0.0, 0.0, 0.0), sigma_m=0.1, intervals=[(0.0, 5.0), (4.0, 6.0)])
    with pytest.raises(ConfigError):
        simulate_toa(static_trajectory(1.0), [], rate_hz=10.0, seed=0)


def test_station_noise_stays_in_band():
    envelope = FREQUENCY_PRESETS["28GHz"]
    draws = draw_station_noise("28GHz", 50, seed=5)
    assert draws == draw_station_noise("28GHz", 50, seed=5)
    for sigma, bias in draws:
        assert envelope.sigma_m[0] <= sigma <= envelope.sigma_m[1]
        assert envelope.bias_m[0] <= bias <= envelope.bias_m[1]


def test_perturbed_transform_offsets_truth_by_requested_amount():
    ground_truth = generate_trajectory(TrajectorySpec(duration_s=5.0, rate_hz=10.0))
    truth = true_transform(ground_truth)
    assert np.allclose(truth.as_matrix(), ground_truth.poses[0].as_matrix())
    guess = perturbed_transform(truth, 1.0, 30.0, seed=0)
    assert np.linalg.norm(guess.translation - truth.translation) == pytest.approx(1.0)
    assert truth.inverse().compose(guess).angle == pytest.approx(np.deg2rad(30.0))
    assert np.allclose(true_transform(ground_truth, 0.5).translation, 0.5 * truth.translation)


def test_backend_config_starts_from_an_identity_offset():
    scenario = small_scenario(seed=3)
    config = backend_config(scenario)
    expected = perturbed_transform(RigidTransform.identity(), scenario.transform_translation_m,
                                   scenario.transform_rotation_deg, seed=3)
    assert np.array_equal(config.transform_initial.as_matrix(), expected.as_matrix())
    assert all(s.position is not None for s in config.stations)

    unknown = backend_config(scenario, PipelineMode(stations=StationKnowledge.UNKNOWN))
    assert np.array_equal(unknown.transform_initial.as_matrix(), RigidTransform.identity().as_matrix())
    assert all(s.position is None for s in unknown.stations)


def test_loop_closures_link_revisited_places():
    ground_truth = generate_trajectory(TrajectorySpec(laps=2, duration_s=60.0, rate_hz=100.0))
    closures = simulate_loop_closures(ground_truth, keyframe_stride=10, window=10, seed=0)
    assert closures
    positions = dict(zip(ground_truth.timestamps.round(6), ground_truth.positions))
    for closure in closures:
        assert closure.timestamp_to - closure.timestamp_from > 3.0
        gap = positions[round(closure.timestamp_to, 6)] - positions[round(closure.timestamp_from, 6)]
        assert np.linalg.norm(gap) < 0.3
        assert np.linalg.norm(closure.measured.translation) < 0.4


def test_scenario_is_deterministic_per_seed():
    first = simulate_scenario(small_scenario(seed=11))
    again = simulate_scenario(small_scenario(seed=11))
    other = simulate_scenario(small_scenario(seed=12))
    assert [m.range_m for m in first.toa] == [m.range_m for m in again.toa]
    assert np.array_equal(first.odometry.positions, again.odometry.positions)
    assert [m.range_m for m in first.toa] != [m.range_m for m in other.toa]
    assert np.array_equal(first.ground_truth.positions, other.ground_truth.positions)
    assert first.true_scale == 1.0
    assert not first.loop_closures
