import copy
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.evaluation import (
    Alignment,
    AteResult,
    EvalReport,
    ate_rmse,
    evaluate_run,
    gdop_profile,
    rank_layouts,
    write_gdop_csv,
    write_reports_csv,
)
from src.pipeline import (
    BackendEstimate,
    PipelineMode,
    SensorClass,
    StationKnowledge,
    apply_visibility_schedule,
    run_backend,
)
from src.simulate import (
    GDOP_LAYOUTS,
    ScenarioConfig,
    backend_config,
    scenario_ground_truth,
    simulate_loop_closures,
    simulate_scenario,
)
from src.streams import ToaMeasurement, Trajectory, read_toa_csv, read_tum, write_toa_csv, write_tum
from src.utils.config_loader import read_scenario_data, scenario_from_dict
from src.utils.errors import ConfigError

SWEEP_AXES = ("layout", "frequency", "seed", "sensor", "stations", "loop_closure")


def write_error_record(directory: Union[str, Path], error: BaseException) -> Path:
    """error.json with the exception type and message."""
    path = Path(directory) / "error.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"error": type(error).__name__, "message": str(error)}, indent=2) + "\n")
    return path


def run_scenario_backend(scenario: ScenarioConfig, ground_truth: Trajectory, odometry: Trajectory,
                         toa: Sequence[ToaMeasurement], mode: Optional[PipelineMode] = None,
                         use_toa: bool = True) -> BackendEstimate:
    """Back-end over a scenario's streams with its visibility schedule and emulated loop closures."""
    mode = mode or scenario.mode
    config = backend_config(scenario, mode, use_toa=use_toa)
    schedule = {s.station_id: s.intervals if s.intervals is not None else [(-np.inf, np.inf)]
                for s in scenario.stations}
    visible = apply_visibility_schedule(toa, schedule) if use_toa else []
    closures = []
    if mode.loop_closure:
        closures = simulate_loop_closures(ground_truth, config.keyframe_stride, config.window, scenario.seed,
                                          scenario.odometry.scale_drift)
    return run_backend(odometry, visible, mode, config, closures)


@dataclass
class RunManifest:
    config: str
    seed: int
    out_dir: str
    artifacts: Dict[str, str] = field(default_factory=dict)

    def path(self, key: str) -> Path:
        return Path(self.out_dir) / self.artifacts[key]

    def missing(self) -> List[str]:
        return [key for key in self.artifacts if not self.path(key).exists()]

    def save(self) -> Path:
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"Manifest not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e.msg}", e.lineno)
        manifest = cls(**data)
        manifest.out_dir = str(path.parent)
        return manifest


def _apply_axis(data: Dict[str, Any], axis: str, value: str) -> Dict[str, Any]:
    data = copy.deepcopy(data)
    mode = data.setdefault("mode", {})
    if axis == "layout":
        if value not in GDOP_LAYOUTS:
            raise ConfigError(f"Unknown layout {value!r}")
        data["stations"] = [{"id": k, "position": list(p)} for k, p in GDOP_LAYOUTS[value].items()]
        if data.get("frequency", "custom") == "custom":
            data["frequency"] = "78GHz"
    elif axis == "frequency":
        data["frequency"] = value
        for station in data["stations"]:
            station.pop("sigma_m", None)
            station.pop("bias_m", None)
    elif axis == "seed":
        data["seed"] = int(value)
    elif axis == "sensor":
        mode["sensor"] = value
    elif axis == "stations":
        mode["stations"] = value
    elif axis == "loop_closure":
        mode["loop_closure"] = value.lower() in ("on", "true", "1", "yes")
    else:
        raise ConfigError(f"Unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    return data


def parse_axes(specs: Sequence[str]) -> Dict[str, List[str]]:
    """``name=v1,v2`` strings to an ordered axis dict"""
    axes: Dict[str, List[str]] = {}
    for spec in specs:
        name, sep, values = spec.partition("=")
        if not sep or not values:
            raise ConfigError(f"Axis must look like name=v1,v2, got {spec!r}")
        if name not in SWEEP_AXES:
            raise ConfigError(f"Unknown sweep axis {name!r}; choose from {', '.join(SWEEP_AXES)}")
        axes[name] = [v.strip() for v in values.split(",") if v.strip()]
    return axes


class ExperimentManager:
    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger(__name__)
        self.logger.info(f"ExperimentManager writing to {self.out_dir}")

    def _is_safe_path(self, path: Path) -> bool:
        """Verify that a path is within the output directory"""
        try:
            resolved = path.resolve()
            root = self.out_dir.resolve()
            return resolved == root or root in resolved.parents
        except (ValueError, RuntimeError) as e:
            self.logger.error(f"Path safety check failed: {e}")
            return False

    def _run_dir(self, name: Optional[str]) -> Path:
        run_dir = self.out_dir / name if name else self.out_dir
        if not self._is_safe_path(run_dir):
            error_msg = f"Invalid run path: {run_dir}"
            self.logger.error(error_msg)
            raise ConfigError(error_msg)
        run_dir.mkdir(parents=True, exist_ok=True)
        return run_dir

    def simulate(self, config: Union[str, Path, Dict[str, Any]], seed: Optional[int] = None,
                 run_name: Optional[str] = None) -> RunManifest:
        """Write ground truth, odometry, ToA stream and manifest for one scenario"""
        data, text, base_dir = read_scenario_data(config)
        if seed is not None:
            data["seed"] = seed
        scenario = scenario_from_dict(data, text, base_dir)
        run_dir = self._run_dir(run_name)
        try:
            simulated = simulate_scenario(scenario)
            if scenario.tum_path is not None:
                data["trajectory"]["tum"] = str(scenario.tum_path.resolve())
            (run_dir / "scenario.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
            write_tum(run_dir / "ground_truth.tum", simulated.ground_truth)
            write_tum(run_dir / "odometry.tum", simulated.odometry)
            write_toa_csv(run_dir / "toa.csv", simulated.toa)

            manifest = RunManifest(
                config=str(config) if not isinstance(config, dict) else scenario.name,
                seed=scenario.seed,
                out_dir=str(run_dir),
                artifacts={"scenario": "scenario.json", "ground_truth": "ground_truth.tum",
                           "odometry": "odometry.tum", "toa": "toa.csv"},
            )
            manifest.save()
            print(f"\n✅ Simulated {scenario.name} (seed {scenario.seed}) into {run_dir}")
            return manifest
        except Exception as e:
            self.logger.error(f"Error simulating scenario: {e}")
            raise

    def _mode(self, base: PipelineMode, sensor: Optional[str], stations: Optional[str],
              loop_closure: Optional[bool]) -> PipelineMode:
        return PipelineMode(
            sensor=SensorClass(sensor) if sensor else base.sensor,
            stations=StationKnowledge(stations) if stations else base.stations,
            loop_closure=base.loop_closure if loop_closure is None else loop_closure,
        )

    def run(self, manifest_path: Union[str, Path], sensor: Optional[str] = None, stations: Optional[str] = None,
            loop_closure: Optional[bool] = None, no_toa: bool = False) -> Tuple[RunManifest, EvalReport]:
        """Run the back-end on a simulated scenario and evaluate it against ground truth"""
        manifest = RunManifest.load(manifest_path)
        missing = manifest.missing()
        if missing:
            raise ConfigError(f"Manifest artifacts missing: {', '.join(missing)}")
        run_dir = Path(manifest.out_dir)
        scenario = scenario_from_dict(json.loads(manifest.path("scenario").read_text()))
        mode = self._mode(scenario.mode, sensor, stations, loop_closure)
        ground_truth = read_tum(manifest.path("ground_truth"))
        odometry = read_tum(manifest.path("odometry"))
        toa = read_toa_csv(manifest.path("toa"), scenario.frequency)

        try:
            estimate = run_scenario_backend(scenario, ground_truth, odometry, toa, mode, use_toa=not no_toa)
            baseline = None
            if not no_toa:
                baseline_estimate = run_scenario_backend(scenario, ground_truth, odometry, toa, mode, use_toa=False)
                baseline = evaluate_run(baseline_estimate, ground_truth)
            positions = np.array([s.position for s in scenario.stations])
            report = evaluate_run(estimate, ground_truth, positions, baseline,
                                  baseline_name="no_toa" if baseline else None)
        except Exception as e:
            self.logger.error(f"Error running back-end: {e}")
            write_error_record(run_dir, e)
            raise

        write_tum(run_dir / "estimate_local.tum", estimate.local_trajectory)
        write_tum(run_dir / "estimate_global.tum", estimate.global_trajectory)
        (run_dir / "estimate_summary.json").write_text(json.dumps(estimate.summary(), indent=2, sort_keys=True) + "\n")
        row = dict(report.to_row(), mode=mode.describe(), seed=scenario.seed, scenario=scenario.name)
        write_reports_csv(run_dir / "report.csv", [row])
        manifest.artifacts.update({"estimate_local": "estimate_local.tum", "estimate_global": "estimate_global.tum",
                                   "summary": "estimate_summary.json", "report": "report.csv"})
        manifest.save()

        print(f"\n📊 {scenario.name} [{mode.describe()}] local ATE {report.local_ate_se3:.3f} m, "
              f"global ATE {row['global_ate'] if report.global_ate is None else f'{report.global_ate:.3f} m'}")
        if report.scale_error_pct is not None:
            print(f"   Scale {report.scale_estimate:.4f}, scale error {report.scale_error_pct:.2f}%")
        self.logger.info(f"Run artifacts written to {run_dir}")
        return manifest, report

    def evaluate(self, estimate_path: Union[str, Path], reference_path: Union[str, Path],
                 alignment: str = "se3") -> AteResult:
        result = ate_rmse(read_tum(estimate_path), read_tum(reference_path), Alignment(alignment))
        print(f"\n📊 ATE ({result.alignment.value}) over {result.pairs} poses: {result.rmse:.4f} m"
              + (f", scale {result.scale:.4f}" if result.alignment == Alignment.SIM3 else ""))
        return result

    def gdop(self, configs: Sequence[Union[str, Path]]) -> pd.DataFrame:
        """GDOP series and ranking across one or more scenario configs"""
        profiles = {}
        timestamps = None
        for config in configs:
            data, text, base_dir = read_scenario_data(config)
            scenario = scenario_from_dict(data, text, base_dir)
            ground_truth = scenario_ground_truth(scenario)
            stations = np.array([s.position for s in scenario.stations])
            profiles[scenario.name] = gdop_profile(ground_truth, stations)
            timestamps = ground_truth.timestamps if timestamps is None else timestamps
            if len(ground_truth) != len(timestamps):
                raise ConfigError("GDOP configs must share one trajectory to be compared")
        write_gdop_csv(self.out_dir / "gdop_series.csv", timestamps, profiles)
        ranking = rank_layouts(profiles)
        ranking.to_csv(self.out_dir / "gdop_ranking.csv", index=False, float_format="%.6f")
        print("\n📊 GDOP ranking:")
        for row in ranking.itertuples(index=False):
            print(f"   {row.rank}. {row.layout}: mean {row.gdop_mean:.3f}, max {row.gdop_max:.3f}")
        return ranking

    def _sweep_cell(self, data: Dict[str, Any], cell: Dict[str, str], name: str) -> Dict[str, Any]:
        row: Dict[str, Any] = dict(cell, cell=name)
        try:
            manifest = self.simulate(data, run_name=name)
            _, report = self.run(Path(manifest.out_dir))
            row.update(report.to_row())
            row["failed"] = False
        except Exception as e:
            self.logger.error(f"Sweep cell {name} failed: {e}")
            row.update(failed=True, error=f"{type(e).__name__}: {e}")
        return row

    def sweep(self, config: Union[str, Path], axes: Dict[str, List[str]], jobs: int = 1) -> pd.DataFrame:
        """Cartesian sweep; one row per cell plus per-axis means"""
        base, _, _ = read_scenario_data(config)
        names = list(axes)
        cells = []
        for values in itertools.product(*(axes[n] for n in names)):
            data = base
            for axis, value in zip(names, values):
                data = _apply_axis(data, axis, value)
            cell = dict(zip(names, values))
            label = "_".join(f"{k}-{v}" for k, v in cell.items()) or "base"
            cells.append((data, cell, f"sweep/{label}"))

        with ThreadPoolExecutor(max_workers=max(jobs, 1)) as executor:
            rows = list(executor.map(lambda c: self._sweep_cell(*c), cells))

        frame = write_reports_csv(self.out_dir / "sweep.csv", rows)
        summaries = []
        ok = frame[~frame["failed"]] if "failed" in frame else frame
        metrics = [c for c in ("local_ate_se3", "global_ate", "scale_error_pct", "gdop_mean", "improvement_pct")
                   if c in ok]
        for axis in names:
            numeric = ok[[axis]].join(ok[metrics].apply(pd.to_numeric, errors="coerce"))
            means = numeric.groupby(axis, sort=False).mean().reset_index()
            means.insert(0, "axis", axis)
            summaries.append(means.rename(columns={axis: "value"}))
        summary = pd.concat(summaries, ignore_index=True) if summaries else pd.DataFrame()
        summary.to_csv(self.out_dir / "sweep_summary.csv", index=False, float_format="%.6f")
        failed = int(frame["failed"].sum()) if "failed" in frame else 0
        print(f"\n📊 Sweep finished: {len(frame)} cells, {failed} failed")
        return summary
