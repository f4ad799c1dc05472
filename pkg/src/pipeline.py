"""ToA-augmented SLAM back-end: graph upkeep and the five refinement routines."""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.factors import PriorFactor, RelativePoseFactor, ToaFactor, relative_information
from src.geometry import RigidTransform, align_se3, align_sim3
from src.graph_core import (
    FactorEdge,
    FactorGraph,
    HuberKernel,
    OptimizeReport,
    OptimizerSettings,
    VariableKind,
    optimize,
    update_marginal_information,
)
from src.streams import LoopClosure, ToaMeasurement, Trajectory
from src.utils.errors import EmptyStream, NonMonotonicTimestamps, NoToaFactors, NotMonocular, ToaSlamError

logger = logging.getLogger(__name__)


class SensorClass(str, Enum):
    RANGE_SCALED = "range_scaled"
    MONOCULAR = "monocular"


class StationKnowledge(str, Enum):
    KNOWN = "known"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class PipelineMode:
    sensor: SensorClass = SensorClass.RANGE_SCALED
    stations: StationKnowledge = StationKnowledge.KNOWN
    loop_closure: bool = False

    @property
    def transform_fixed(self) -> bool:
        return self.stations == StationKnowledge.UNKNOWN

    @property
    def monocular(self) -> bool:
        return self.sensor == SensorClass.MONOCULAR

    def describe(self) -> str:
        lc = "lc" if self.loop_closure else "no-lc"
        return f"{self.sensor.value}/{self.stations.value}/{lc}"


@dataclass
class TriggerThresholds:
    residual: float = 3.0
    motion_m: float = 5.0
    elapsed_s: float = 10.0
    keyframes: int = 20


@dataclass
class RefinementTriggerState:
    max_normalized_residual: float = 0.0
    accumulated_translation_m: float = 0.0
    elapsed_s: float = 0.0
    keyframes_since: int = 0

    def __post_init__(self):
        for name in ("max_normalized_residual", "accumulated_translation_m", "elapsed_s", "keyframes_since"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def reset(self):
        self.max_normalized_residual = 0.0
        self.accumulated_translation_m = 0.0
        self.elapsed_s = 0.0
        self.keyframes_since = 0


def should_trigger_global_refinement(state: RefinementTriggerState, thresholds: TriggerThresholds) -> bool:
    return (state.max_normalized_residual > thresholds.residual
            or state.accumulated_translation_m > thresholds.motion_m
            or state.elapsed_s > thresholds.elapsed_s
            or state.keyframes_since > thresholds.keyframes)


@dataclass
class StationSpec:
    """What the back-end knows about a station: range noise and, in Known mode, position."""
    station_id: str
    sigma_m: float
    position: Optional[np.ndarray] = None


@dataclass
class BackendConfig:
    stations: List[StationSpec] = field(default_factory=list)
    keyframe_stride: int = 10
    window: int = 10
    covisibility_skip: int = 2
    covisibility_inflation: float = 4.0
    thresholds: TriggerThresholds = field(default_factory=TriggerThresholds)
    odometry_translation_sigma_m: float = 0.01
    odometry_rotation_sigma_rad: float = 0.002
    min_translation_sigma_m: float = 1e-3
    min_rotation_sigma_rad: float = 1e-3
    transform_initial: RigidTransform = field(default_factory=RigidTransform.identity)
    anchor_sigma: float = 1e-4
    bias_prior_sigma_m: float = 0.5
    min_transform_extent_m: float = 2.0
    min_transform_spread_m: float = 0.25
    residual_guard_keyframes: int = 5
    station_init_min_measurements: int = 30
    association_window_s: float = 0.02
    toa_huber_delta: float = 3.0
    use_toa: bool = True
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)


@dataclass
class BackendEstimate:
    timestamps: np.ndarray
    local_poses: List[RigidTransform]
    transform: RigidTransform
    biases: Dict[str, float]
    scale: float
    stations: Dict[str, np.ndarray]
    global_trajectory: Trajectory
    mode: PipelineMode
    toa_factor_count: int = 0
    refinements: Dict[str, int] = field(default_factory=dict)

    @property
    def local_trajectory(self) -> Trajectory:
        return Trajectory(self.timestamps.copy(), list(self.local_poses))

    def summary(self) -> Dict:
        return {
            "mode": {"sensor": self.mode.sensor.value, "stations": self.mode.stations.value,
                     "loop_closure": self.mode.loop_closure},
            "keyframes": len(self.local_poses),
            "transform": {"translation": self.transform.translation.tolist(),
                          "quaternion_xyzw": self.transform.quaternion.tolist()},
            "scale": self.scale,
            "biases_m": dict(self.biases),
            "stations": {k: v.tolist() for k, v in self.stations.items()},
            "toa_factors": self.toa_factor_count,
            "refinements": dict(self.refinements),
        }


class BackendGraph(FactorGraph):
    """Factor graph plus the bookkeeping the refinement routines need."""

    def __init__(self, mode: PipelineMode, settings: Optional[OptimizerSettings] = None):
        super().__init__()
        self.mode = mode
        self.settings = settings or OptimizerSettings()
        self.transform_id: Optional[int] = None
        self.scale_id: Optional[int] = None
        self.bias_ids: Dict[str, int] = {}
        self.station_ids: Dict[str, int] = {}
        self.keyframe_ids: List[int] = []
        self.keyframe_times: List[float] = []
        self.scale_correction = 1.0
        # Known mode: ToA factors join pose refinements once T_go has been bootstrapped
        self.transform_ready = mode.transform_fixed
        self._toa: Dict[int, ToaFactor] = {}

    def add_factor(self, factor: FactorEdge) -> int:
        fid = super().add_factor(factor)
        if isinstance(factor, ToaFactor):
            self._toa[fid] = factor
        return fid

    def remove_factor(self, fid: int):
        super().remove_factor(fid)
        self._toa.pop(fid, None)

    def toa_factors(self) -> List[ToaFactor]:
        return list(self._toa.values())

    def active_factors(self, factors: Iterable[FactorEdge]) -> List[FactorEdge]:
        if self.transform_ready:
            return list(factors)
        return [f for f in factors if not isinstance(f, ToaFactor)]

    def bias_priors(self, bias_ids: Iterable[int]) -> List[FactorEdge]:
        wanted = set(bias_ids)
        return [f for f in self.factors_touching(wanted) if isinstance(f, PriorFactor)]

    def free_ids(self, poses: Sequence[int] = (), transform: bool = False, biases: bool = False,
                 stations: bool = False, scale: bool = False) -> List[int]:
        """Free set honouring the mode contract."""
        free = list(poses)
        if transform and not self.mode.transform_fixed:
            free.append(self.transform_id)
        if biases:
            free += list(self.bias_ids.values())
        if stations and self.mode.stations == StationKnowledge.UNKNOWN:
            free += list(self.station_ids.values())
        if scale and self.mode.monocular:
            free.append(self.scale_id)
        return free

    def global_pose(self, pose: RigidTransform) -> RigidTransform:
        transform = self.value(self.transform_id)
        scale = self.value(self.scale_id)
        mapped = transform.compose(pose)
        return mapped.with_translation(scale * mapped.translation)


@contextmanager
def _free_only(graph: FactorGraph, free: Iterable[int], factors: Sequence[FactorEdge]):
    """Temporarily fix every variable touched by ``factors`` outside ``free``."""
    free = set(free)
    scope = free | {vid for f in factors for vid in f.variable_ids}
    saved = {vid: graph.variables[vid].fixed for vid in scope}
    try:
        for vid in scope:
            graph.variables[vid].fixed = vid not in free
        yield
    finally:
        for vid, fixed in saved.items():
            graph.variables[vid].fixed = fixed


def tracking_pose_step(graph: BackendGraph, pose_id: int, odometry_factor: Optional[FactorEdge],
                       toa_factors: Sequence[ToaFactor]) -> Optional[OptimizeReport]:
    """Optimize only ``pose_id`` against its odometry factor and visible ToA factors."""
    factors = ([odometry_factor] if odometry_factor is not None else []) + list(toa_factors)
    if not factors:
        return None
    with _free_only(graph, [pose_id], factors):
        return optimize(graph, graph.settings, factors=factors, include_priors=True)


def local_window_refinement(graph: BackendGraph, window: Sequence[int]) -> OptimizeReport:
    if len(window) < 2:
        raise ValueError(f"Local window needs at least 2 keyframes, got {len(window)}")
    factors = graph.active_factors(graph.factors_touching(window))
    use_toa = any(isinstance(f, ToaFactor) for f in factors)
    free = graph.free_ids(window, transform=use_toa, biases=use_toa, stations=use_toa)
    if use_toa:
        factors += graph.bias_priors(graph.bias_ids.values())
    with _free_only(graph, free, factors):
        return optimize(graph, graph.settings, factors=factors, include_priors=True)


def global_map_refinement(graph: BackendGraph) -> OptimizeReport:
    if len(graph.keyframe_ids) < 2:
        raise ValueError("Global refinement needs at least 2 keyframes")
    factors = graph.active_factors(graph.factors.values())
    use_toa = any(isinstance(f, ToaFactor) for f in factors)
    free = graph.free_ids(graph.keyframe_ids, transform=use_toa, biases=use_toa, stations=use_toa)
    with _free_only(graph, free, factors):
        return optimize(graph, graph.settings, factors=factors, include_priors=False)


def transformation_refinement(graph: BackendGraph) -> OptimizeReport:
    """Refine T_go and the biases with every keyframe pose held fixed."""
    if not graph.toa_factors():
        raise NoToaFactors("Transformation refinement needs ToA factors")
    factors = graph.toa_factors() + graph.bias_priors(graph.bias_ids.values())
    free = graph.free_ids(transform=True, biases=True)
    with _free_only(graph, free, factors):
        report = optimize(graph, graph.settings, factors=factors, include_priors=False)
    if report.rank_deficient:
        logger.warning("Transformation refinement is rank-deficient: T_go is not fully observable yet")
    return report


def scale_refinement(graph: BackendGraph) -> OptimizeReport:
    """Refine s (with T_go, biases and unknown stations), then fold s into the map."""
    if not graph.mode.monocular:
        raise NotMonocular("Scale refinement only applies in monocular mode")
    if not graph.toa_factors():
        raise NoToaFactors("Scale refinement needs ToA factors")
    factors = graph.toa_factors() + graph.bias_priors(graph.bias_ids.values())
    free = graph.free_ids(transform=True, biases=True, stations=True, scale=True)
    with _free_only(graph, free, factors):
        report = optimize(graph, graph.settings, factors=factors, include_priors=False)
    propagate_scale(graph)
    return report


def propagate_scale(graph: BackendGraph):
    """Multiply the local map by s and reset s to 1; global poses are unchanged."""
    k = float(graph.value(graph.scale_id))
    if k == 1.0:
        return
    for vid in graph.keyframe_ids:
        pose = graph.value(vid)
        graph.set_value(vid, pose.with_translation(k * pose.translation))
    transform_node = graph.variable(graph.transform_id)
    transform_node.value = transform_node.value.with_translation(k * transform_node.value.translation)
    transform_node.prior_mean = transform_node.prior_mean.with_translation(k * transform_node.prior_mean.translation)
    s_inv = np.diag([1.0, 1.0, 1.0] + [1.0 / k] * 3)
    transform_node.prior_information = s_inv @ transform_node.prior_information @ s_inv
    for factor in graph.factors.values():
        if isinstance(factor, (RelativePoseFactor, ToaFactor)):
            factor.rescale(k)
    graph.set_value(graph.scale_id, 1.0)
    graph.variable(graph.scale_id).prior_mean = 1.0
    graph.scale_correction *= k
    logger.info(f"Propagated scale {k:.6f} into the map (cumulative {graph.scale_correction:.6f})")


def apply_visibility_schedule(measurements: Sequence[ToaMeasurement],
                              schedule: Dict[str, Sequence[Tuple[float, float]]]) -> List[ToaMeasurement]:
    """Keep measurements inside their station's [start, end) intervals."""
    kept = []
    for m in measurements:
        intervals = schedule.get(m.station_id, ())
        if any(start <= m.timestamp < end for start, end in intervals):
            kept.append(m)
    return kept


def _multilaterate(positions: np.ndarray, ranges: np.ndarray) -> Optional[np.ndarray]:
    """Linear least-squares station position from receiver positions and ranges."""
    centered = positions - positions.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    spread = singular / np.sqrt(len(positions))
    if spread[1] < 0.3:
        return None
    design = np.hstack([-2.0 * positions, np.ones((len(positions), 1))])
    target = ranges ** 2 - np.sum(positions ** 2, axis=1)
    if spread[2] >= 0.2:
        solution = np.linalg.lstsq(design, target, rcond=None)[0]
        return solution[:3]

    # near-planar path: solve in-plane, then lift off the plane on the +z side
    _, _, vt = np.linalg.svd(centered)
    normal = vt[2] if vt[2][2] >= 0 else -vt[2]
    origin = positions.mean(axis=0)
    basis = vt[:2]
    planar = (positions - origin) @ basis.T
    design = np.hstack([-2.0 * planar, np.ones((len(planar), 1))])
    target = ranges ** 2 - np.sum(planar ** 2, axis=1)
    solution = np.linalg.lstsq(design, target, rcond=None)[0]
    in_plane = solution[:2]
    height = np.sqrt(max(solution[2] - float(in_plane @ in_plane), 0.0))
    return origin + in_plane @ basis + height * normal


def _trilaterate(stations: np.ndarray, ranges: np.ndarray) -> Optional[np.ndarray]:
    """Receiver position from four or more non-coplanar stations, linear least squares."""
    design = np.hstack([-2.0 * stations, np.ones((len(stations), 1))])
    singular = np.linalg.svd(design, compute_uv=False)
    if len(singular) < 4 or singular[-1] < 1e-6 * singular[0]:
        return None
    target = ranges ** 2 - np.sum(stations ** 2, axis=1)
    return np.linalg.lstsq(design, target, rcond=None)[0][:3]


class ToaSlamBackend:
    """Consumes odometry and ToA in timestamp order and keeps the factor graph current."""

    def __init__(self, mode: PipelineMode, config: BackendConfig):
        self.logger = logging.getLogger(__name__)
        self.mode = mode
        self.config = config
        self.graph = BackendGraph(mode, config.optimizer)
        graph = self.graph
        graph.transform_id = graph.add_variable(VariableKind.TRANSFORM, config.transform_initial,
                                                fixed=mode.transform_fixed, name="T_go")
        graph.scale_id = graph.add_variable(VariableKind.SCALE, 1.0, fixed=not mode.monocular, name="scale")
        self.stations = {s.station_id: s for s in config.stations}
        for spec in config.stations:
            bias_id = graph.add_variable(VariableKind.BIAS, 0.0, name=f"bias:{spec.station_id}")
            graph.bias_ids[spec.station_id] = bias_id
            graph.add_factor(PriorFactor(bias_id, VariableKind.BIAS, 0.0,
                                         np.array([[1.0 / config.bias_prior_sigma_m ** 2]])))
            if mode.stations == StationKnowledge.KNOWN:
                if spec.position is None:
                    raise ValueError(f"Known-station mode needs a position for {spec.station_id}")
                graph.station_ids[spec.station_id] = graph.add_variable(
                    VariableKind.STATION_POSITION, spec.position, fixed=True, name=f"station:{spec.station_id}")

        self.trigger = RefinementTriggerState()
        self.refinements = {"tracking": 0, "local": 0, "global": 0, "transformation": 0, "scale": 0}
        self._keyframe_dead_reckoning: List[RigidTransform] = []
        self._keyframe_toa: Dict[int, List[ToaFactor]] = {}
        self._odometry_factors: Dict[int, RelativePoseFactor] = {}
        self._keyframe_index_by_time: Dict[float, int] = {}
        self._pending_stations: Dict[str, List[Tuple[int, np.ndarray, float, float]]] = {}
        self._loop_closures: List[LoopClosure] = []
        self._latest_sample: Optional[Tuple[float, RigidTransform]] = None
        self._sample_count = 0
        self._last_refinement_time = 0.0
        self._dropped_toa = 0

    # ingestion

    def add_loop_closure(self, closure: LoopClosure):
        self._loop_closures.append(closure)

    def add_odometry_sample(self, timestamp: float, dead_reckoning: RigidTransform):
        if self._sample_count % self.config.keyframe_stride == 0:
            self._new_keyframe(timestamp, dead_reckoning)
        self._latest_sample = (timestamp, dead_reckoning)
        self._sample_count += 1

    def add_toa(self, measurement: ToaMeasurement):
        graph = self.graph
        if not self.config.use_toa or not graph.keyframe_ids:
            return
        if measurement.station_id not in self.stations:
            self.logger.warning(f"Dropping ToA from unconfigured station {measurement.station_id}")
            return
        sample_time, sample_pose = self._latest_sample
        if abs(measurement.timestamp - sample_time) > self.config.association_window_s:
            self._dropped_toa += 1
            return

        keyframe = len(graph.keyframe_ids) - 1
        offset = self._keyframe_dead_reckoning[keyframe].inverse().compose(sample_pose).translation
        offset = offset * graph.scale_correction
        if measurement.station_id in graph.station_ids:
            self._add_toa_factor(keyframe, measurement.station_id, offset, measurement.range_m, measurement.timestamp)
            return
        pending = self._pending_stations.setdefault(measurement.station_id, [])
        pending.append((keyframe, offset, measurement.range_m, measurement.timestamp))
        if len(pending) >= self.config.station_init_min_measurements:
            self._try_initialize_station(measurement.station_id)

    def _add_toa_factor(self, keyframe: int, station: str, offset: np.ndarray, range_m: float,
                        timestamp: float) -> ToaFactor:
        graph = self.graph
        spec = self.stations[station]
        factor = ToaFactor(graph.keyframe_ids[keyframe], graph.transform_id, graph.scale_id,
                           graph.bias_ids[station], graph.station_ids[station], range_m, spec.sigma_m,
                           body_offset=offset, kernel=HuberKernel(self.config.toa_huber_delta),
                           station_key=station, timestamp=timestamp)
        graph.add_factor(factor)
        self._keyframe_toa.setdefault(keyframe, []).append(factor)
        return factor

    def _try_initialize_station(self, station: str):
        graph = self.graph
        pending = self._pending_stations[station]
        receivers = []
        for keyframe, offset, _, _ in pending:
            pose = graph.value(graph.keyframe_ids[keyframe])
            local = RigidTransform(pose.quaternion, pose.apply(offset))
            receivers.append(graph.global_pose(local).translation)
        ranges = np.array([p[2] for p in pending])
        position = _multilaterate(np.array(receivers), ranges)
        if position is None:
            return

        station_id = graph.add_variable(VariableKind.STATION_POSITION, position, name=f"station:{station}")
        graph.station_ids[station] = station_id
        factors = [self._add_toa_factor(k, station, off, rng, t) for k, off, rng, t in pending]
        del self._pending_stations[station]
        active = factors + graph.bias_priors([graph.bias_ids[station]])
        with _free_only(graph, [station_id, graph.bias_ids[station]], active):
            optimize(graph, graph.settings, factors=active, include_priors=False)
        self.logger.info(f"Initialized station {station} at {np.round(graph.value(station_id), 3)} "
                         f"from {len(factors)} ranges")

    # keyframes

    def _odometry_information(self, steps: int) -> np.ndarray:
        sigma_t = max(self.config.odometry_translation_sigma_m, self.config.min_translation_sigma_m)
        sigma_r = max(self.config.odometry_rotation_sigma_rad, self.config.min_rotation_sigma_rad)
        root = np.sqrt(steps)
        return relative_information(sigma_t * root * self.graph.scale_correction, sigma_r * root)

    def _scaled_delta(self, earlier: int, dead_reckoning: RigidTransform) -> RigidTransform:
        delta = self._keyframe_dead_reckoning[earlier].inverse().compose(dead_reckoning)
        return delta.with_translation(delta.translation * self.graph.scale_correction)

    def _new_keyframe(self, timestamp: float, dead_reckoning: RigidTransform):
        graph = self.graph
        index = len(graph.keyframe_ids)
        if index >= 1:
            self._close_keyframe(index - 1, timestamp)

        if index == 0:
            pose_id = graph.add_variable(VariableKind.POSE, RigidTransform.identity(), name="kf:0")
            graph.add_factor(PriorFactor(pose_id, VariableKind.POSE, RigidTransform.identity(),
                                         np.eye(6) / self.config.anchor_sigma ** 2))
        else:
            delta = self._scaled_delta(index - 1, dead_reckoning)
            previous = graph.value(graph.keyframe_ids[index - 1])
            pose_id = graph.add_variable(VariableKind.POSE, previous.compose(delta), name=f"kf:{index}")
            odometry = RelativePoseFactor(graph.keyframe_ids[index - 1], pose_id, delta,
                                          self._odometry_information(self.config.keyframe_stride))
            graph.add_factor(odometry)
            self._odometry_factors[index] = odometry
            skip = self.config.covisibility_skip
            if skip >= 2 and index >= skip:
                info = self._odometry_information(self.config.keyframe_stride * skip) / self.config.covisibility_inflation
                graph.add_factor(RelativePoseFactor(graph.keyframe_ids[index - skip], pose_id,
                                                    self._scaled_delta(index - skip, dead_reckoning), info,
                                                    edge_type="covisibility"))
            self.trigger.accumulated_translation_m += float(np.linalg.norm(delta.translation))
            self.trigger.keyframes_since += 1

        graph.keyframe_ids.append(pose_id)
        graph.keyframe_times.append(timestamp)
        self._keyframe_dead_reckoning.append(dead_reckoning)
        self._keyframe_index_by_time[round(timestamp, 6)] = index
        self.trigger.elapsed_s = max(timestamp - self._last_refinement_time, 0.0)
        if self.mode.loop_closure:
            self._attach_loop_closures(index, timestamp)

    def _attach_loop_closures(self, index: int, timestamp: float):
        graph = self.graph
        remaining = []
        for closure in self._loop_closures:
            if round(closure.timestamp_to, 6) != round(timestamp, 6):
                remaining.append(closure)
                continue
            earlier = self._keyframe_index_by_time.get(round(closure.timestamp_from, 6))
            if earlier is None:
                continue
            measured = closure.measured.with_translation(closure.measured.translation * graph.scale_correction)
            info = relative_information(closure.translation_sigma_m * graph.scale_correction,
                                        closure.rotation_sigma_rad)
            graph.add_factor(RelativePoseFactor(graph.keyframe_ids[earlier], graph.keyframe_ids[index],
                                                measured, info, edge_type="loop_closure"))
            self.logger.debug(f"Loop closure between keyframes {earlier} and {index}")
        self._loop_closures = remaining

    def _close_keyframe(self, index: int, now: float):
        graph = self.graph
        toa = graph.active_factors(self._keyframe_toa.get(index, []))
        if index >= 1:
            tracking_pose_step(graph, graph.keyframe_ids[index], self._odometry_factors.get(index), toa)
            self.refinements["tracking"] += 1
        # residual evidence only counts once a few keyframes have arrived since the last refinement
        if toa and self.trigger.keyframes_since >= self.config.residual_guard_keyframes:
            worst = float(np.max(graph.normalized_residuals(toa)))
            self.trigger.max_normalized_residual = max(self.trigger.max_normalized_residual, worst)

        closed = index + 1
        if closed >= 2 and closed % self.config.window == 0:
            local_window_refinement(graph, graph.keyframe_ids[closed - self.config.window:closed])
            self.refinements["local"] += 1

        if not graph.transform_ready:
            if self._transform_observable():
                self._bootstrap_transform(now)
            return
        if closed >= 2 and should_trigger_global_refinement(self.trigger, self.config.thresholds):
            self._global_refinement(now)

    def _transform_observable(self) -> bool:
        """Enough ToA and a keyframe path that is long and not collinear."""
        graph = self.graph
        if len(graph.keyframe_ids) < 3 or not graph.toa_factors():
            return False
        positions = np.array([graph.value(v).translation for v in graph.keyframe_ids])
        extent = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
        spread = np.linalg.svd(positions - positions.mean(axis=0), compute_uv=False) / np.sqrt(len(positions))
        return extent >= self.config.min_transform_extent_m and spread[1] >= self.config.min_transform_spread_m

    def _bootstrap_transform(self, now: float):
        graph = self.graph
        graph.transform_ready = True
        self.logger.info(f"Bootstrapping T_go from {len(graph.toa_factors())} ToA factors")
        self._seed_transform()
        self._global_refinement(now)

    def _seed_transform(self):
        """Replace the initial T_go (and s) by a trilateration fit when that fits the ranges better."""
        graph = self.graph
        seed = self._trilateration_alignment()
        if seed is None:
            return
        toa = graph.toa_factors()
        saved = graph.value(graph.transform_id), graph.value(graph.scale_id)
        before = float(np.sum(graph.normalized_residuals(toa) ** 2))
        graph.set_value(graph.transform_id, seed[0])
        graph.set_value(graph.scale_id, seed[1])
        after = float(np.sum(graph.normalized_residuals(toa) ** 2))
        if not after < before:
            graph.set_value(graph.transform_id, saved[0])
            graph.set_value(graph.scale_id, saved[1])
            return
        self.logger.info(f"Seeded T_go from trilaterated receivers (ToA cost {before:.3e} -> {after:.3e})")

    def _trilateration_alignment(self) -> Optional[Tuple[RigidTransform, float]]:
        graph = self.graph
        epochs: Dict[Tuple[int, float], List[ToaFactor]] = {}
        for factor in graph.toa_factors():
            epochs.setdefault((factor.pose_id, round(factor.timestamp, 6)), []).append(factor)
        local, fitted = [], []
        for (pose_id, _), factors in epochs.items():
            if len({f.station_key for f in factors}) < 4:
                continue
            position = _trilaterate(np.array([graph.value(f.station_id) for f in factors]),
                                    np.array([f.range_m for f in factors]))
            if position is None:
                continue
            local.append(graph.value(pose_id).apply(factors[0].body_offset))
            fitted.append(position)
        if len(local) < 3:
            return None
        try:
            if self.mode.monocular:
                similarity = align_sim3(np.array(local), np.array(fitted))
                rigid = similarity.rigid
                return rigid.with_translation(rigid.translation / similarity.scale), similarity.scale
            return align_se3(np.array(local), np.array(fitted)), 1.0
        except ToaSlamError as e:
            self.logger.debug(f"No trilateration seed: {e}")
            return None

    def _global_refinement(self, now: float):
        graph = self.graph
        try:
            if graph.toa_factors():
                if self.mode.monocular:
                    scale_refinement(graph)
                    self.refinements["scale"] += 1
                elif not self.mode.transform_fixed:
                    transformation_refinement(graph)
                    self.refinements["transformation"] += 1
            if len(graph.keyframe_ids) >= 2:
                global_map_refinement(graph)
                self.refinements["global"] += 1
            if graph.toa_factors():
                targets = [] if self.mode.transform_fixed else [graph.transform_id]
                if self.mode.monocular:
                    targets.append(graph.scale_id)
                if targets:
                    update_marginal_information(graph, targets)
        except Exception as e:
            self.logger.error(f"Error during global refinement: {e}")
            raise
        self.logger.debug(f"Global refinement at t={now:.2f}s over {len(graph.keyframe_ids)} keyframes")
        self.trigger.reset()
        self._last_refinement_time = now

    def finish(self) -> BackendEstimate:
        graph = self.graph
        if not graph.keyframe_ids:
            raise EmptyStream("No keyframes were created")
        last = len(graph.keyframe_ids) - 1
        now = graph.keyframe_times[-1]
        self._close_keyframe(last, now)
        if not graph.transform_ready and graph.toa_factors():
            graph.transform_ready = True
            self._seed_transform()
        if len(graph.keyframe_ids) >= 2:
            self._global_refinement(now)
        if self._dropped_toa:
            self.logger.warning(f"{self._dropped_toa} ToA measurements had no odometry sample within "
                                f"{self.config.association_window_s * 1000:.0f} ms")
        return self.estimate()

    def estimate(self) -> BackendEstimate:
        graph = self.graph
        poses = [graph.value(v) for v in graph.keyframe_ids]
        timestamps = np.array(graph.keyframe_times)
        global_poses = [graph.global_pose(p) for p in poses]
        return BackendEstimate(
            timestamps=timestamps,
            local_poses=poses,
            transform=graph.value(graph.transform_id),
            biases={k: float(graph.value(v)) for k, v in graph.bias_ids.items()},
            scale=float(graph.scale_correction * graph.value(graph.scale_id)),
            stations={k: np.asarray(graph.value(v)).copy() for k, v in graph.station_ids.items()},
            global_trajectory=Trajectory(timestamps.copy(), global_poses),
            mode=self.mode,
            toa_factor_count=len(graph.toa_factors()),
            refinements=dict(self.refinements),
        )


def run_backend(odometry: Trajectory, toa: Sequence[ToaMeasurement], mode: PipelineMode, config: BackendConfig,
                loop_closures: Sequence[LoopClosure] = ()) -> BackendEstimate:
    """Feed dead-reckoning odometry and ToA through the back-end in timestamp order.

    On equal timestamps the odometry sample is processed first.
    """
    if len(odometry) < config.keyframe_stride + 1:
        raise EmptyStream(f"Odometry has {len(odometry)} samples, need at least {config.keyframe_stride + 1}")
    if np.any(np.diff(odometry.timestamps) <= 0.0):
        raise NonMonotonicTimestamps("Odometry timestamps must be strictly increasing")
    toa_times = np.array([m.timestamp for m in toa])
    if len(toa_times) and np.any(np.diff(toa_times) < 0.0):
        raise NonMonotonicTimestamps("ToA timestamps must be non-decreasing")

    backend = ToaSlamBackend(mode, config)
    for closure in loop_closures:
        backend.add_loop_closure(closure)
    logger.info(f"Running back-end ({mode.describe()}) on {len(odometry)} odometry samples and "
                f"{len(toa)} ToA measurements")

    j = 0
    for t, pose in zip(odometry.timestamps, odometry.poses):
        while j < len(toa) and toa[j].timestamp < t:
            backend.add_toa(toa[j])
            j += 1
        backend.add_odometry_sample(float(t), pose)
    while j < len(toa):
        backend.add_toa(toa[j])
        j += 1
    return backend.finish()
