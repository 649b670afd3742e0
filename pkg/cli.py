#!/usr/bin/env python3
"""
Stereo-Inertial Odometry - Command Line Interface

This module provides the main entry point for the odometry engine. It parses
command line arguments, validates inputs and dispatches to one of three
commands:

- run:  estimate a trajectory from an ASL recording or a synthetic scenario
- eval: ATE RMSE of an estimated TUM trajectory against a reference
- sim:  generate a synthetic scenario as an ASL recording

License: MIT
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from config import Config
from odometry.estimator import run_pipeline
from odometry.errors import OdometryError
from odometry.loop_closure import save_vocabulary, synthetic_descriptors, train_vocabulary
from odometry.simulation import export_bundle, parse_scenario, simulate, synthetic_config
from odometry.sources import EurocSource, SyntheticSource
from odometry.trajectory import compute_ate, read_trajectory, write_trajectory

# Exit codes
EXIT_INPUT_ERROR = 1      # unreadable input, bad config, parse failure
EXIT_INTERNAL_ERROR = 2   # unexpected failure inside the pipeline

# Configure command line argument parser
parser = argparse.ArgumentParser(
    description="Stereo-inertial odometry: run, evaluate and simulate",
    epilog="""
Examples:
  python cli.py run data/MH_01_easy --config config/euroc.conf --out data/runs/mh01
  python cli.py run --scenario kind=Figure8,duration=60 --out data/runs/fig8 --deterministic
  python cli.py eval data/runs/mh01/trajectory.txt data/MH_01_groundtruth.txt --align
  python cli.py sim --scenario kind=Circle,seed=7 --out data/sim/circle
""",
    formatter_class=argparse.RawDescriptionHelpFormatter,
)
parser.add_argument("--verbose", action="store_true", help="Log debug detail from every module")
commands = parser.add_subparsers(dest="command", required=True)

run_parser = commands.add_parser("run", help="Estimate a trajectory")
run_parser.add_argument("path", nargs="?", help="ASL dataset folder (omit with --scenario)")
run_parser.add_argument("--scenario", help="Synthetic scenario instead of a dataset, e.g. kind=Figure8,seed=1")
run_parser.add_argument("--config", help="Configuration file (default: built-in defaults)")
run_parser.add_argument("--out", required=True, help="Output folder")
run_parser.add_argument("--deterministic", action="store_true", help="Single-threaded, iteration-capped run")

eval_parser = commands.add_parser("eval", help="ATE RMSE of a trajectory")
eval_parser.add_argument("estimate", help="Estimated TUM trajectory")
eval_parser.add_argument("groundtruth", help="Reference TUM trajectory")
eval_parser.add_argument("--align", action="store_true", help="Rigidly align the estimate first (SE3)")

sim_parser = commands.add_parser("sim", help="Generate a synthetic ASL recording")
sim_parser.add_argument("--scenario", required=True, help="Scenario, e.g. kind=Circle,duration=30,seed=7")
sim_parser.add_argument("--out", required=True, help="Output folder")


def load_config(path, synthetic=False):
    """Configuration from ``path``; the simulator rig when synthetic and no file is given."""
    if path:
        return Config.load(path)
    return synthetic_config() if synthetic else Config()


def validate_arguments(args):
    """
    Validate command line arguments.

    Raises:
        ValueError: on missing or conflicting arguments
    """
    if args.command == "run":
        if bool(args.path) == bool(args.scenario):
            raise ValueError("run needs either a dataset path or --scenario")
        if args.path and not Path(args.path).is_dir():
            raise ValueError(f"dataset path does not exist: {args.path}")
        if args.config and not Path(args.config).is_file():
            raise ValueError(f"configuration file does not exist: {args.config}")


def cmd_run(args):
    cfg = load_config(args.config, synthetic=bool(args.scenario))
    if args.deterministic:
        cfg = cfg.with_overrides({"run.deterministic": True})
    if args.scenario:
        scenario = parse_scenario(args.scenario)
        print(f"🎯 Simulating scenario {scenario.kind} ({scenario.duration:g} s, seed {scenario.seed})")
        source = SyntheticSource(simulate(scenario))
    else:
        print(f"🎯 Loading dataset {args.path}")
        source = EurocSource(args.path, cfg)

    print(f"🔄 Running odometry over {len(source)} frames...")
    trajectory, manifest = run_pipeline(source, cfg, args.out)
    print(f"📊 {manifest.frames} frames, {manifest.keyframes} keyframes, modes {manifest.mode_counts}")
    if manifest.ate_rmse is not None:
        print(f"📊 ATE RMSE (SE3 aligned): {manifest.ate_rmse:.4f} m")
    print(f"✅ Trajectory, frame log and manifest saved to {args.out}")


def cmd_eval(args):
    estimate = read_trajectory(args.estimate)
    groundtruth = read_trajectory(args.groundtruth)
    rmse = compute_ate(estimate, groundtruth, align="SE3" if args.align else None)
    print(f"ATE RMSE: {rmse:.4f} m")


def cmd_sim(args):
    scenario = parse_scenario(args.scenario)
    cfg = synthetic_config()
    out = Path(args.out)
    print(f"🎯 Generating {scenario.kind} scenario ({scenario.duration:g} s, seed {scenario.seed})")
    bundle = simulate(scenario)

    print("🔄 Writing ASL recording...")
    mav = export_bundle(bundle, out)
    write_trajectory(bundle.groundtruth(), out / "groundtruth.txt")

    seed = cfg["run.seed"]
    descriptor_sets = [synthetic_descriptors(np.array([o.feature_id for o in f.stereo], dtype=int), seed)
                       for f in bundle.frames if f.stereo]
    if descriptor_sets:
        vocabulary = train_vocabulary(descriptor_sets, cfg["loop.vocabulary_k"], cfg["loop.vocabulary_levels"], seed)
        save_vocabulary(vocabulary, out / "vocabulary.bin")
    print(f"📊 {len(bundle.frames)} frames, {len(bundle.imu)} IMU samples, {len(bundle.scene)} scene points")
    print(f"✅ Dataset saved to {mav}")


def main(argv=None):
    """
    Main execution function for the odometry CLI.

    This function:
    1. Parses command line arguments
    2. Validates input parameters
    3. Runs the selected command
    4. Maps failures to exit codes (1 input, 2 internal)
    """
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        validate_arguments(args)
        {"run": cmd_run, "eval": cmd_eval, "sim": cmd_sim}[args.command](args)
    except (ValueError, FileNotFoundError) as e:
        print(f"❌ Validation Error: {e}")
        sys.exit(EXIT_INPUT_ERROR)
    except OdometryError as e:
        print(f"❌ Pipeline Error: {e}")
        sys.exit(EXIT_INTERNAL_ERROR)
    except Exception as e:
        print(f"❌ Unexpected Error: {e}")
        sys.exit(EXIT_INTERNAL_ERROR)


if __name__ == "__main__":
    main()
