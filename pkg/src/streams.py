"""Measurement stream value types and their file formats.

TUM trajectories: one pose per line, ``timestamp tx ty tz qx qy qz qw``.
ToA streams: CSV with header ``timestamp,station_id,range_m``.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import pandas as pd

from src.geometry import RigidTransform
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TOA_COLUMNS = ["timestamp", "station_id", "range_m"]


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: List[RigidTransform]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError(f"{len(self.timestamps)} timestamps for {len(self.poses)} poses")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0]) if len(self) else 0.0

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    def transformed(self, transform: RigidTransform) -> "Trajectory":
        return Trajectory(self.timestamps.copy(), [transform.compose(p) for p in self.poses])


@dataclass
class OdometryIncrement:
    """Relative pose measured between the previous sample and ``timestamp``."""
    timestamp: float
    delta: RigidTransform


@dataclass
class ToaMeasurement:
    timestamp: float
    station_id: str
    range_m: float
    noise_class: str = "custom"


@dataclass
class LoopClosure:
    """Relative pose between the keyframes at two timestamps, in odometry units."""
    timestamp_from: float
    timestamp_to: float
    measured: RigidTransform
    translation_sigma_m: float = 0.01
    rotation_sigma_rad: float = field(default_factory=lambda: float(np.deg2rad(0.5)))


def integrate_odometry(increments: Sequence[OdometryIncrement], start_time: float,
                       start: RigidTransform = None) -> Trajectory:
    pose = start or RigidTransform.identity()
    timestamps = [start_time]
    poses = [pose]
    for inc in increments:
        pose = pose.compose(inc.delta)
        timestamps.append(inc.timestamp)
        poses.append(pose)
    return Trajectory(np.array(timestamps), poses)


def trajectory_increments(trajectory: Trajectory) -> List[OdometryIncrement]:
    return [OdometryIncrement(float(trajectory.timestamps[k]),
                              trajectory.poses[k - 1].inverse().compose(trajectory.poses[k]))
            for k in range(1, len(trajectory))]


def write_tum(path: PathLike, trajectory: Trajectory):
    rows = np.array([[t, *p.translation, *p.quaternion] for t, p in zip(trajectory.timestamps, trajectory.poses)])
    np.savetxt(path, rows.reshape(-1, 8), fmt=["%.6f"] + ["%.9f"] * 7, delimiter=" ")


def read_tum(path: PathLike) -> Trajectory:
    try:
        data = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as e:
        raise ConfigError(f"Malformed TUM file {path}: {e}")
    if data.size and data.shape[1] != 8:
        raise ConfigError(f"TUM file {path} needs 8 columns, found {data.shape[1]}")
    poses = [RigidTransform(row[4:8], row[1:4]) for row in data]
    return Trajectory(data[:, 0] if data.size else np.zeros(0), poses)


def write_toa_csv(path: PathLike, measurements: Sequence[ToaMeasurement]):
    frame = pd.DataFrame(
        [(m.timestamp, m.station_id, m.range_m) for m in measurements], columns=TOA_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.9f")


def read_toa_csv(path: PathLike, noise_class: str = "custom") -> List[ToaMeasurement]:
    frame = pd.read_csv(path, dtype={"station_id": str})
    if list(frame.columns) != TOA_COLUMNS:
        raise ConfigError(f"ToA CSV {path} must have header {','.join(TOA_COLUMNS)}, got {','.join(frame.columns)}")
    return [ToaMeasurement(float(t), str(s), float(r), noise_class)
            for t, s, r in frame.itertuples(index=False, name=None)]
