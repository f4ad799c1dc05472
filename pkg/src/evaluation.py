"""Trajectory metrics and base-station geometry analysis."""
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.geometry import align_se3, align_sim3, associate
from src.pipeline import BackendEstimate, StationKnowledge
from src.streams import Trajectory
from src.utils.errors import AllSingular, AssociationError, SingularGeometry, TooFewPoses

logger = logging.getLogger(__name__)

GDOP_CONDITION_LIMIT = 1e10
BASELINE_FAILED = "undefined (baseline failed)"
NOT_AVAILABLE = "N/A"


class Alignment(str, Enum):
    NONE = "none"
    SE3 = "se3"
    SIM3 = "sim3"


@dataclass
class AteResult:
    rmse: float
    alignment: Alignment
    pairs: int
    scale: float = 1.0


def _associated_positions(estimate: Trajectory, reference: Trajectory, max_dt: float):
    est_idx, ref_idx = associate(estimate.timestamps, reference.timestamps, max_dt)
    if len(est_idx) == 0:
        raise AssociationError(f"No estimate timestamp lies within {max_dt * 1000:.0f} ms of the reference")
    if len(est_idx) < 3:
        raise TooFewPoses(f"Only {len(est_idx)} associated pose pairs, need 3")
    return estimate.positions[est_idx], reference.positions[ref_idx]


def ate_rmse(estimate: Trajectory, reference: Trajectory, alignment: Union[Alignment, str] = Alignment.SE3,
             max_dt: float = 0.02) -> AteResult:
    """Translation RMSE after the requested alignment; NONE compares frames directly."""
    alignment = Alignment(alignment)
    est, ref = _associated_positions(estimate, reference, max_dt)
    scale = 1.0
    if alignment == Alignment.SE3:
        est = align_se3(est, ref).apply(est)
    elif alignment == Alignment.SIM3:
        similarity = align_sim3(est, ref)
        scale = similarity.scale
        est = similarity.apply(est)
    rmse = float(np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))
    return AteResult(rmse, alignment, len(ref), scale)


def scale_error_pct(recovered_scale: float, true_scale: float) -> float:
    if true_scale <= 0:
        raise ValueError(f"True scale must be positive, got {true_scale}")
    return 100.0 * abs(recovered_scale / true_scale - 1.0)


def improvement_pct(baseline: Optional[float], variant: Optional[float]) -> Optional[float]:
    """Relative reduction of ``variant`` against ``baseline``; None when the baseline failed."""
    if baseline is None or variant is None or not np.isfinite(baseline) or baseline <= 0:
        return None
    return 100.0 * (baseline - variant) / baseline


def gdop(receiver: np.ndarray, stations: np.ndarray) -> float:
    """sqrt(trace((G^T G)^-1)) for unit line-of-sight rows augmented with a clock column."""
    receiver = np.asarray(receiver, dtype=float).reshape(3)
    stations = np.asarray(stations, dtype=float).reshape(-1, 3)
    if len(stations) < 4:
        raise ValueError(f"GDOP needs at least 4 stations, got {len(stations)}")
    offsets = stations - receiver
    distances = np.linalg.norm(offsets, axis=1)
    if np.any(distances <= 1e-12):
        raise ValueError("Receiver coincides with a station")
    design = np.hstack([offsets / distances[:, None], np.ones((len(stations), 1))])
    normal = design.T @ design
    if np.linalg.cond(normal) > GDOP_CONDITION_LIMIT:
        raise SingularGeometry("Station geometry is singular at this receiver position")
    return float(np.sqrt(np.trace(np.linalg.inv(normal))))


@dataclass
class GdopProfile:
    mean: float
    max: float
    series: np.ndarray
    singular_count: int = 0


def gdop_profile(positions: Union[Trajectory, np.ndarray], stations: np.ndarray) -> GdopProfile:
    """GDOP along a path; singular samples become NaN and are counted."""
    points = positions.positions if isinstance(positions, Trajectory) else np.asarray(positions, dtype=float)
    series = np.full(len(points), np.nan)
    for k, point in enumerate(points.reshape(-1, 3)):
        try:
            series[k] = gdop(point, stations)
        except SingularGeometry:
            continue
    valid = np.isfinite(series)
    singular = int(len(series) - valid.sum())
    if not np.any(valid):
        raise AllSingular(f"All {len(series)} samples have singular station geometry")
    if singular:
        logger.warning(f"{singular} of {len(series)} samples had singular GDOP geometry")
    return GdopProfile(float(np.mean(series[valid])), float(np.max(series[valid])), series, singular)


@dataclass
class EvalReport:
    local_ate_se3: float
    local_ate_sim3: Optional[float] = None
    unscaled_local_ate: Optional[float] = None
    global_ate: Optional[float] = None
    scale_estimate: float = 1.0
    scale_error_pct: Optional[float] = None
    global_to_local_ratio: Optional[float] = None
    gdop_mean: Optional[float] = None
    gdop_max: Optional[float] = None
    improvement_pct: Optional[float] = None
    baseline: Optional[str] = None
    extra: Dict[str, float] = field(default_factory=dict)

    def to_row(self) -> Dict[str, object]:
        row = {k: v for k, v in asdict(self).items() if k != "extra"}
        row.update(self.extra)
        if row["global_ate"] is None:
            row["global_ate"] = NOT_AVAILABLE
        if self.baseline is not None and self.improvement_pct is None:
            row["improvement_pct"] = BASELINE_FAILED
        return row


def evaluate_run(estimate: BackendEstimate, ground_truth: Trajectory,
                 station_positions: Optional[np.ndarray] = None, baseline: Optional[EvalReport] = None,
                 baseline_name: Optional[str] = None, max_dt: float = 0.02) -> EvalReport:
    """Full report for one back-end run against ground truth."""
    local = estimate.local_trajectory
    report = EvalReport(local_ate_se3=ate_rmse(local, ground_truth, Alignment.SE3, max_dt).rmse,
                        scale_estimate=estimate.scale)

    if estimate.mode.monocular:
        sim3 = ate_rmse(local, ground_truth, Alignment.SIM3, max_dt)
        report.local_ate_sim3 = sim3.rmse
        report.scale_error_pct = scale_error_pct(1.0 / sim3.scale, 1.0)
        raw = Trajectory(local.timestamps, [p.with_translation(p.translation / estimate.scale) for p in local.poses])
        report.unscaled_local_ate = ate_rmse(raw, ground_truth, Alignment.SE3, max_dt).rmse

    has_global = estimate.toa_factor_count > 0 and estimate.mode.stations == StationKnowledge.KNOWN
    if has_global:
        report.global_ate = ate_rmse(estimate.global_trajectory, ground_truth, Alignment.NONE, max_dt).rmse
        if report.local_ate_se3 > 0:
            report.global_to_local_ratio = report.global_ate / report.local_ate_se3

    if station_positions is not None and len(station_positions) >= 4:
        est_idx, ref_idx = associate(local.timestamps, ground_truth.timestamps, max_dt)
        try:
            profile = gdop_profile(ground_truth.positions[ref_idx], station_positions)
            report.gdop_mean, report.gdop_max = profile.mean, profile.max
        except AllSingular as e:
            logger.warning(f"GDOP not reported: {e}")

    if baseline is not None:
        report.baseline = baseline_name or "baseline"
        report.improvement_pct = improvement_pct(baseline.local_ate_se3, report.local_ate_se3)
    return report


def write_reports_csv(path: Union[str, Path], rows: Sequence[Mapping[str, object]]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows))
    frame.to_csv(path, index=False, float_format="%.6f")
    return frame


def write_gdop_csv(path: Union[str, Path], timestamps: np.ndarray, profiles: Mapping[str, GdopProfile]) -> pd.DataFrame:
    frame = pd.DataFrame({"timestamp": np.asarray(timestamps, dtype=float)})
    for name, profile in profiles.items():
        frame[name] = profile.series
    frame.to_csv(path, index=False, float_format="%.6f", na_rep="nan")
    return frame


def rank_layouts(profiles: Mapping[str, GdopProfile]) -> pd.DataFrame:
    rows: List[Dict[str, object]] = [
        {"layout": name, "gdop_mean": p.mean, "gdop_max": p.max, "singular_samples": p.singular_count}
        for name, p in profiles.items()
    ]
    frame = pd.DataFrame(rows).sort_values("gdop_mean", kind="stable").reset_index(drop=True)
    frame.insert(0, "rank", np.arange(1, len(frame) + 1))
    return frame
