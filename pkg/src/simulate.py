"""Scenario generation: ground truth, corrupted odometry, ToA ranges and loop closures.

Every random draw comes from ``np.random.default_rng([seed, stream])`` with a fixed
stream id per concern, so one (scenario, seed) pair always yields the same files.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.spatial.transform import Rotation, Slerp

from src.geometry import RigidTransform, se3_exp
from src.pipeline import BackendConfig, PipelineMode, StationSpec, TriggerThresholds
from src.streams import (
    LoopClosure,
    OdometryIncrement,
    ToaMeasurement,
    Trajectory,
    integrate_odometry,
    read_tum,
    trajectory_increments,
)
from src.utils.errors import ConfigError, TooFewWaypoints

logger = logging.getLogger(__name__)

ODOMETRY_STREAM = 1
TOA_STREAM = 2
LOOP_CLOSURE_STREAM = 3
STATION_NOISE_STREAM = 4
TRANSFORM_STREAM = 5

MAX_REDRAWS = 100

# correlated odometry bias: first-order Gauss-Markov, stationary std as a fraction of the white sigma
BIAS_TIME_CONSTANT_S = 10.0
BIAS_STD_FRACTION = 0.3


@dataclass(frozen=True)
class NoiseEnvelope:
    sigma_m: Tuple[float, float]
    bias_m: Tuple[float, float]


FREQUENCY_PRESETS: Dict[str, NoiseEnvelope] = {
    "28GHz": NoiseEnvelope(sigma_m=(0.276, 0.413), bias_m=(-0.194, 0.083)),
    "78GHz": NoiseEnvelope(sigma_m=(0.142, 0.196), bias_m=(-0.087, 0.031)),
}

AEROLAB_POSITIONS = {
    "BS1": (2.5, -2.5, 4.5),
    "BS2": (2.5, 2.5, 4.0),
    "BS3": (-2.5, 2.5, 5.0),
    "BS4": (-6.5, -2.5, 2.0),
}

# per-station (sigma_m, bias_m) measured on the first Aerolab sequence
AEROLAB_AL01 = {
    "28GHz": {"BS1": (0.3292, 0.0420), "BS2": (0.3605, -0.0121), "BS3": (0.3199, 0.0419), "BS4": (0.4132, 0.0828)},
    "78GHz": {"BS1": (0.1958, -0.0271), "BS2": (0.1944, 0.0134), "BS3": (0.1910, 0.0031), "BS4": (0.1425, -0.0172)},
}

GDOP_LAYOUTS = {
    "tetrahedral": {"BS1": (0, 0, 3), "BS2": (-4, -4, 0), "BS3": (4, -4, 0), "BS4": (0, 4, 0)},
    "diamond": {"BS1": (0, -5, 0.5), "BS2": (5, 0, 1), "BS3": (0, 5, 0.5), "BS4": (-5, 0, 1)},
    "z_shape": {"BS1": (-5, -5, 0.5), "BS2": (5, -5, 3), "BS3": (-5, 5, 3), "BS4": (5, 5, 0.5)},
    "asymmetric": {"BS1": (-5, -2, 3), "BS2": (2, -5, 1), "BS3": (5, 3, 2), "BS4": (-1, 5, 0.5)},
    "clustered": {"BS1": (-5, -3, 1), "BS2": (-5, -1, 2), "BS3": (-5, 1, 1), "BS4": (-5, 3, 2)},
}

DEFAULT_WAYPOINTS = [
    (-2.0, -2.0, 1.0),
    (2.0, -2.0, 1.6),
    (2.0, 2.0, 2.2),
    (-2.0, 2.0, 1.4),
    (-2.0, -2.0, 1.0),
]

DEFAULT_BOUNDING_BOX = ((-2.5, -2.5, 0.0), (2.5, 2.5, 5.0))


@dataclass
class BaseStation:
    station_id: str
    position: np.ndarray
    sigma_m: float
    bias_m: float = 0.0
    intervals: Optional[List[Tuple[float, float]]] = None
    noise_class: str = "custom"

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.sigma_m <= 0:
            raise ConfigError(f"Station {self.station_id}: sigma_m must be positive, got {self.sigma_m}")
        if self.intervals is not None:
            self.intervals = [(float(a), float(b)) for a, b in self.intervals]
            previous_end = -np.inf
            for start, end in self.intervals:
                if not start < end or start < previous_end:
                    raise ConfigError(f"Station {self.station_id}: intervals must be increasing and non-overlapping")
                previous_end = end

    def active(self, timestamps: np.ndarray) -> np.ndarray:
        timestamps = np.asarray(timestamps, dtype=float)
        if self.intervals is None:
            return np.ones(timestamps.shape, dtype=bool)
        mask = np.zeros(timestamps.shape, dtype=bool)
        for start, end in self.intervals:
            mask |= (timestamps >= start) & (timestamps < end)
        return mask

    def to_spec(self, known: bool = True) -> StationSpec:
        return StationSpec(self.station_id, self.sigma_m, self.position.copy() if known else None)


@dataclass
class OdometryNoiseModel:
    translation_sigma_m: float = 0.0
    rotation_sigma_rad: float = 0.0
    scale_drift: float = 1.0
    random_walk_bias: bool = False

    def __post_init__(self):
        if self.translation_sigma_m < 0 or self.rotation_sigma_rad < 0:
            raise ConfigError("Odometry sigmas must be non-negative")
        if self.scale_drift <= 0:
            raise ConfigError(f"Scale drift must be positive, got {self.scale_drift}")


@dataclass
class TrajectorySpec:
    waypoints: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_WAYPOINTS, dtype=float))
    laps: int = 1
    duration_s: float = 120.0
    rate_hz: float = 100.0
    bounding_box: Tuple[Sequence[float], Sequence[float]] = DEFAULT_BOUNDING_BOX

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        if self.waypoints.shape[1] not in (3, 4):
            raise ConfigError("Waypoints must be [x, y, z] or [x, y, z, yaw_deg]")
        if self.laps < 1:
            raise ConfigError(f"laps must be at least 1, got {self.laps}")


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    tum_path: Optional[Path] = None
    duration_s: float = 120.0
    odometry_rate_hz: float = 100.0
    toa_rate_hz: float = 10.0
    stations: List[BaseStation] = field(default_factory=list)
    frequency: str = "78GHz"
    mode: PipelineMode = field(default_factory=PipelineMode)
    seed: int = 0
    odometry: OdometryNoiseModel = field(default_factory=OdometryNoiseModel)
    transform_translation_m: float = 1.0
    transform_rotation_deg: float = 30.0
    backend: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigError(f"duration_s must be positive, got {self.duration_s}")
        if self.odometry_rate_hz <= 0 or self.toa_rate_hz <= 0:
            raise ConfigError("Rates must be positive")
        if self.frequency not in (*FREQUENCY_PRESETS, "custom"):
            raise ConfigError(f"Unknown frequency preset {self.frequency!r}")


@dataclass
class SimulatedRun:
    ground_truth: Trajectory
    odometry: Trajectory
    toa: List[ToaMeasurement]
    loop_closures: List[LoopClosure]
    true_transform: RigidTransform
    true_scale: float


def _heading_yaw(points: np.ndarray) -> np.ndarray:
    yaw = np.zeros(len(points))
    for i in range(len(points)):
        j = min(i + 1, len(points) - 1)
        k = j - 1 if j == i else i
        step = points[j] - points[k]
        yaw[i] = np.arctan2(step[1], step[0]) if np.linalg.norm(step[:2]) > 1e-12 else (yaw[i - 1] if i else 0.0)
    return yaw


def generate_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Sample a C1 path through the waypoints at ``rate_hz`` over ``duration_s``.

    Positions use shape-preserving cubic interpolation, so samples never leave the
    box spanned by the waypoints; yaw is spherically interpolated.
    """
    if len(spec.waypoints) < 2:
        raise TooFewWaypoints(f"Need at least 2 waypoints, got {len(spec.waypoints)}")
    lower, upper = (np.asarray(b, dtype=float) for b in spec.bounding_box)
    if np.any(spec.waypoints[:, :3] < lower - 1e-9) or np.any(spec.waypoints[:, :3] > upper + 1e-9):
        raise ConfigError(f"Waypoints leave the bounding box {lower.tolist()} .. {upper.tolist()}")

    closed = np.allclose(spec.waypoints[0, :3], spec.waypoints[-1, :3])
    laps = [spec.waypoints] + [spec.waypoints[1:] if closed else spec.waypoints] * (spec.laps - 1)
    points = np.vstack(laps)
    positions = points[:, :3]
    yaw = np.deg2rad(points[:, 3]) if points.shape[1] == 4 else _heading_yaw(positions)

    lengths = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    keep = np.concatenate([[True], lengths > 1e-12])
    positions, yaw = positions[keep], yaw[keep]
    count = int(round(spec.duration_s * spec.rate_hz)) + 1
    timestamps = np.arange(count) / spec.rate_hz

    if len(positions) < 2:
        pose = RigidTransform.from_rotation(Rotation.from_euler("z", yaw[0]), positions[0])
        return Trajectory(timestamps, [pose] * count)

    distance = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(positions, axis=0), axis=1))])
    knots = spec.duration_s * distance / distance[-1]
    sample_times = np.clip(timestamps, 0.0, spec.duration_s)
    sampled = np.clip(PchipInterpolator(knots, positions, axis=0)(sample_times), lower, upper)
    rotations = Slerp(knots, Rotation.from_euler("z", yaw))(sample_times)
    quaternions = rotations.as_quat()
    poses = [RigidTransform(q, p) for q, p in zip(quaternions, sampled)]
    logger.debug(f"Generated {count} poses over {distance[-1]:.1f} m of path")
    return Trajectory(timestamps, poses)


def corrupt_odometry(ground_truth: Trajectory, model: OdometryNoiseModel, seed: int) -> List[OdometryIncrement]:
    """Relative-pose measurements with tangent noise and translation scale drift.

    With ``random_walk_bias`` a time-correlated bias is added to every increment; it
    is bounded, so drift grows with path length without running away.
    """
    rng = np.random.default_rng([seed, ODOMETRY_STREAM])
    sigmas = np.array([model.rotation_sigma_rad] * 3 + [model.translation_sigma_m] * 3)
    bias = np.zeros(6)
    previous = float(ground_truth.timestamps[0])
    measured = []
    for increment in trajectory_increments(ground_truth):
        noise = rng.normal(0.0, 1.0, 6) * sigmas
        if model.random_walk_bias:
            decay = np.exp(-max(increment.timestamp - previous, 0.0) / BIAS_TIME_CONSTANT_S)
            bias = decay * bias + np.sqrt(1.0 - decay ** 2) * BIAS_STD_FRACTION * sigmas * rng.normal(0.0, 1.0, 6)
            noise = noise + bias
        previous = increment.timestamp
        delta = increment.delta.compose(se3_exp(noise)) if np.any(noise) else increment.delta
        measured.append(OdometryIncrement(increment.timestamp,
                                          delta.with_translation(delta.translation * model.scale_drift)))
    return measured


def simulate_toa(ground_truth: Trajectory, stations: Sequence[BaseStation], rate_hz: float,
                 seed: int) -> List[ToaMeasurement]:
    """Ranges d = |p - L| + N(bias, sigma^2) on the rate grid, merged by (time, station id)."""
    if not stations:
        raise ConfigError("simulate_toa needs at least one station")
    start, end = float(ground_truth.timestamps[0]), float(ground_truth.timestamps[-1])
    times = start + np.arange(int(np.floor((end - start) * rate_hz + 1e-9)) + 1) / rate_hz
    positions = ground_truth.positions
    receivers = np.column_stack([np.interp(times, ground_truth.timestamps, positions[:, k]) for k in range(3)])

    measurements = []
    for index, station in enumerate(sorted(stations, key=lambda s: s.station_id)):
        rng = np.random.default_rng([seed, TOA_STREAM, index])
        true_range = np.linalg.norm(receivers - station.position, axis=1)
        ranges = true_range + rng.normal(station.bias_m, station.sigma_m, len(times))
        for _ in range(MAX_REDRAWS):
            bad = ranges <= 0.0
            if not np.any(bad):
                break
            ranges[bad] = true_range[bad] + rng.normal(station.bias_m, station.sigma_m, int(bad.sum()))
        else:
            raise ConfigError(f"Station {station.station_id} sits within noise reach of the path")
        mask = station.active(times)
        measurements += [ToaMeasurement(float(t), station.station_id, float(r), station.noise_class)
                         for t, r in zip(times[mask], ranges[mask])]
    measurements.sort(key=lambda m: (m.timestamp, m.station_id))
    return measurements


def simulate_loop_closures(ground_truth: Trajectory, keyframe_stride: int, window: int, seed: int,
                           scale_drift: float = 1.0, max_distance_m: float = 0.3) -> List[LoopClosure]:
    """One closure per revisiting keyframe, to the nearest keyframe more than 3 windows back."""
    rng = np.random.default_rng([seed, LOOP_CLOSURE_STREAM])
    indices = np.arange(0, len(ground_truth), keyframe_stride)
    positions = ground_truth.positions[indices]
    closures = []
    for j in range(len(indices)):
        earlier = np.arange(0, max(j - 3 * window, 0))
        if not len(earlier):
            continue
        distance = np.linalg.norm(positions[earlier] - positions[j], axis=1)
        if distance.min() >= max_distance_m:
            continue
        i = int(earlier[np.argmin(distance)])
        truth = ground_truth.poses[indices[i]].inverse().compose(ground_truth.poses[indices[j]])
        closure = LoopClosure(float(ground_truth.timestamps[indices[i]]), float(ground_truth.timestamps[indices[j]]),
                              truth)
        noise = rng.normal(0.0, 1.0, 6) * np.array([closure.rotation_sigma_rad] * 3 + [closure.translation_sigma_m] * 3)
        measured = truth.compose(se3_exp(noise))
        closure.measured = measured.with_translation(measured.translation * scale_drift)
        closures.append(closure)
    logger.debug(f"Emulated {len(closures)} loop closures")
    return closures


def draw_station_noise(frequency: str, count: int, seed: int) -> List[Tuple[float, float]]:
    """(sigma_m, bias_m) per station drawn uniformly from the band's envelope."""
    envelope = FREQUENCY_PRESETS[frequency]
    rng = np.random.default_rng([seed, STATION_NOISE_STREAM])
    sigma = rng.uniform(*envelope.sigma_m, count)
    bias = rng.uniform(*envelope.bias_m, count)
    return list(zip(sigma.tolist(), bias.tolist()))


def true_transform(ground_truth: Trajectory, scale_drift: float = 1.0) -> RigidTransform:
    """T_go mapping the odometry start frame (in odometry units) into the global frame."""
    first = ground_truth.poses[0]
    return first.with_translation(first.translation * scale_drift)


def perturbed_transform(truth: RigidTransform, translation_m: float, rotation_deg: float,
                        seed: int) -> RigidTransform:
    rng = np.random.default_rng([seed, TRANSFORM_STREAM])
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    rotation = Rotation.from_rotvec(np.deg2rad(rotation_deg) * axis / np.linalg.norm(axis))
    offset = RigidTransform.from_rotation(rotation, translation_m * direction / np.linalg.norm(direction))
    return truth.compose(offset)


def scenario_ground_truth(scenario: ScenarioConfig) -> Trajectory:
    if scenario.tum_path is not None:
        return read_tum(scenario.tum_path)
    return generate_trajectory(replace(scenario.trajectory, duration_s=scenario.duration_s,
                                       rate_hz=scenario.odometry_rate_hz))


def simulate_scenario(scenario: ScenarioConfig) -> SimulatedRun:
    ground_truth = scenario_ground_truth(scenario)
    increments = corrupt_odometry(ground_truth, scenario.odometry, scenario.seed)
    odometry = integrate_odometry(increments, float(ground_truth.timestamps[0]))
    toa = simulate_toa(ground_truth, scenario.stations, scenario.toa_rate_hz, scenario.seed)
    closures = []
    if scenario.mode.loop_closure:
        stride = int(scenario.backend.get("keyframe_stride", 10))
        window = int(scenario.backend.get("window", 10))
        closures = simulate_loop_closures(ground_truth, stride, window, scenario.seed, scenario.odometry.scale_drift)
    drift = scenario.odometry.scale_drift
    logger.info(f"Simulated {scenario.name}: {len(ground_truth)} poses, {len(toa)} ranges, "
                f"{len(closures)} loop closures")
    return SimulatedRun(ground_truth, odometry, toa, closures, true_transform(ground_truth, drift), 1.0 / drift)


BACKEND_KEYS = {
    "keyframe_stride": ("keyframe_stride", int),
    "window": ("window", int),
    "covisibility_inflation": ("covisibility_inflation", float),
    "min_transform_extent_m": ("min_transform_extent_m", float),
    "bias_prior_sigma_m": ("bias_prior_sigma_m", float),
    "station_init_min_measurements": ("station_init_min_measurements", int),
    "min_transform_spread_m": ("min_transform_spread_m", float),
    "residual_guard_keyframes": ("residual_guard_keyframes", int),
}

THRESHOLD_KEYS = {
    "residual_threshold": ("residual", float),
    "motion_threshold_m": ("motion_m", float),
    "time_threshold_s": ("elapsed_s", float),
    "keyframe_threshold": ("keyframes", int),
}


def backend_config(scenario: ScenarioConfig, mode: Optional[PipelineMode] = None,
                   use_toa: bool = True) -> BackendConfig:
    """Back-end settings for a scenario.

    With known stations T_go starts at the identity moved by the scenario's
    ``transform_init`` offset.
    """
    mode = mode or scenario.mode
    known = not mode.transform_fixed
    config = BackendConfig(
        stations=[s.to_spec(known) for s in scenario.stations],
        odometry_translation_sigma_m=scenario.odometry.translation_sigma_m * scenario.odometry.scale_drift,
        odometry_rotation_sigma_rad=scenario.odometry.rotation_sigma_rad,
        use_toa=use_toa,
    )
    thresholds = TriggerThresholds()
    for key, value in scenario.backend.items():
        if key in BACKEND_KEYS:
            attr, cast = BACKEND_KEYS[key]
            setattr(config, attr, cast(value))
        elif key in THRESHOLD_KEYS:
            attr, cast = THRESHOLD_KEYS[key]
            setattr(thresholds, attr, cast(value))
    config.thresholds = thresholds
    if known:
        config.transform_initial = perturbed_transform(
            RigidTransform.identity(), scenario.transform_translation_m, scenario.transform_rotation_deg, scenario.seed)
    return config
