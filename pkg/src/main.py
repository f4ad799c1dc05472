import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.append(str(project_root))

# Load environment variables
load_dotenv()

from src.experiment_manager import ExperimentManager, parse_axes, write_error_record
from src.templates.scenario_templates import ScenarioTemplates
from src.utils.config_loader import load_config
from src.utils.errors import ConfigError
from src.utils.logger import setup_logger

EXIT_OK = 0
EXIT_SCENARIO_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toa-slam", description="ToA-augmented factor-graph SLAM back-end")
    parser.add_argument("--seed", type=int, help="override the scenario seed")
    parser.add_argument("--out", help="output directory (default from config.json / TOA_SLAM_OUT_DIR)")
    parser.add_argument("--config", help="scenario config path or preset name")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--list-presets", action="store_true", help="print bundled scenario presets")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("simulate", help="generate ground truth, odometry and ToA streams")

    run = sub.add_parser("run", help="run the back-end on a simulated scenario and evaluate it")
    run.add_argument("--manifest", help="manifest.json or run directory (default: --out)")
    run.add_argument("--mode", choices=["range_scaled", "monocular"])
    run.add_argument("--stations", choices=["known", "unknown"])
    run.add_argument("--loop-closure", choices=["on", "off"])
    run.add_argument("--no-toa", action="store_true", help="baseline run without ToA factors")

    evaluate = sub.add_parser("eval", help="ATE of a TUM estimate against a TUM reference")
    evaluate.add_argument("estimate")
    evaluate.add_argument("reference")
    evaluate.add_argument("--alignment", choices=["none", "se3", "sim3"], default="se3")

    gdop = sub.add_parser("gdop", help="GDOP along the scenario path, ranked across configs")
    gdop.add_argument("configs", nargs="*", help="additional scenario configs or presets")

    sweep = sub.add_parser("sweep", help="cartesian experiment sweep")
    sweep.add_argument("--axis", action="append", default=[], help="name=v1,v2,... (repeatable)")
    sweep.add_argument("--jobs", type=int, help="parallel cells (default from config)")
    return parser


def list_presets():
    print("\n📂 Scenario presets:")
    for name, description in ScenarioTemplates.list_templates().items():
        print(f"   {name}: {description}")


def log_directory(out_dir: Path, configured: Optional[str]) -> Optional[Path]:
    """``log_dir`` from config.json, resolved inside the output directory."""
    if not configured:
        return None
    root = out_dir.resolve()
    path = (root / configured).resolve()
    if path != root and root not in path.parents:
        raise ConfigError(f"log_dir {configured!r} must stay inside the output directory {out_dir}")
    return path


def dispatch(args: argparse.Namespace, settings: dict, out_dir: Path) -> int:
    manager = ExperimentManager(out_dir)

    if args.command == "simulate":
        if not args.config:
            raise ConfigError("simulate needs --config <path|preset>")
        manager.simulate(args.config, seed=args.seed)
    elif args.command == "run":
        loop_closure = None if args.loop_closure is None else args.loop_closure == "on"
        manager.run(args.manifest or out_dir, sensor=args.mode, stations=args.stations,
                    loop_closure=loop_closure, no_toa=args.no_toa)
    elif args.command == "eval":
        manager.evaluate(args.estimate, args.reference, args.alignment)
    elif args.command == "gdop":
        configs = ([args.config] if args.config else []) + list(args.configs)
        if not configs:
            raise ConfigError("gdop needs at least one config")
        manager.gdop(configs)
    elif args.command == "sweep":
        if not args.config:
            raise ConfigError("sweep needs --config <path|preset>")
        axes = parse_axes(args.axis)
        if args.seed is not None and "seed" not in axes:
            axes["seed"] = [str(args.seed)]
        manager.sweep(args.config, axes, jobs=args.jobs or int(settings["jobs"]))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.list_presets:
        list_presets()
        return EXIT_OK
    if not args.command:
        parser.print_usage()
        return EXIT_USAGE

    out_dir: Optional[Path] = None
    try:
        settings = load_config()
        out_dir = Path(args.out or settings["out_dir"])
        logger = setup_logger(log_directory(out_dir, settings.get("log_dir")),
                              args.log_level or settings.get("log_level"))
        logger.debug(f"Command: {args.command}")
        return dispatch(args, settings, out_dir)
    except ConfigError as e:
        print(f"\n❌ Configuration error: {e}")
        return EXIT_USAGE
    except Exception as e:
        print(f"\n❌ {type(e).__name__}: {e}")
        logging.getLogger(__name__).error(f"{args.command} failed: {type(e).__name__}: {e}")
        if out_dir is not None:
            write_error_record(out_dir, e)
        return EXIT_SCENARIO_FAILURE


if __name__ == "__main__":
    sys.exit(main())
