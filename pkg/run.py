import os
import sys

sys.path.insert(1, os.path.join(os.path.dirname(os.path.abspath(__file__)), "python-slamkit"))

import argparse
import json
import logging
from pathlib import Path

from slamkit.data import ArgumentError, ConfigError, DatasetFormatError, PipelineError, SlamError
from slamkit.dataset_io import read_tum, write_dataset
from slamkit.main import AblationSuite, MetricsReport, RunConfig, run_ablation, run_pipeline
from slamkit.metrics import evaluate_trajectory
from slamkit.scenario import ScenarioConfig
from slamkit.simulator import simulate

logger = logging.getLogger("slamkit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_STAGE = 4

failure_exit_codes = {"config": EXIT_CONFIG, "input": EXIT_INPUT, "stage": EXIT_STAGE}


def command_simulate(args) -> int:
    config = ScenarioConfig.from_json_file(args.config)
    dataset = simulate(config)
    write_dataset(dataset, args.out)
    logger.info(f"Wrote {config.name} ({len(dataset.frame_times)} frames, {len(dataset.rig)} cameras) to {args.out}")
    return EXIT_OK


def command_run(args) -> int:
    config = RunConfig.from_json_file(args.config)
    config.output = args.out
    config.plots = config.plots or args.plots
    report = run_pipeline(config)
    return report_exit_code(report)


def command_ablate(args) -> int:
    suite = AblationSuite.from_json_file(args.suite)
    reports = run_ablation(suite, args.out, args.jobs)
    return max((report_exit_code(r) for r in reports), default=EXIT_OK)


def command_evaluate(args) -> int:
    rmse, drift, length = evaluate_trajectory(read_tum(args.est), read_tum(args.ref))
    print(json.dumps({"ate_rmse_m": rmse, "drift_pct": drift, "length_m": length}, sort_keys=True))
    return EXIT_OK


def report_exit_code(report: MetricsReport) -> int:
    if report.succeeded:
        return EXIT_OK
    return failure_exit_codes.get(report.failure_kind, EXIT_STAGE)


def parse_arguments(argv=None):
    parser = argparse.ArgumentParser(description="Multi-camera visual-inertial SLAM on simulated data.")
    parser.add_argument(
        "--log-level", type=str, default="INFO", help="One of [DEBUG, INFO, WARNING, ERROR]. Default is INFO."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate_parser = commands.add_parser("simulate", help="Simulate a scenario and write the dataset directory.")
    simulate_parser.add_argument("--config", type=str, required=True, help="Scenario JSON file.")
    simulate_parser.add_argument("--out", type=str, required=True, help="Dataset output directory.")
    simulate_parser.set_defaults(handler=command_simulate)

    run_parser = commands.add_parser("run", help="Run the full pipeline for one configuration.")
    run_parser.add_argument("--config", type=str, required=True, help="Run JSON file.")
    run_parser.add_argument("--out", type=str, required=True, help="Artifact output directory.")
    run_parser.add_argument("--plots", action="store_true", help="Also plot the loop-closure error histograms.")
    run_parser.set_defaults(handler=command_run)

    ablate_parser = commands.add_parser("ablate", help="Run every combination of an ablation suite.")
    ablate_parser.add_argument("--suite", type=str, required=True, help="Ablation suite JSON file.")
    ablate_parser.add_argument("--out", type=str, required=True, help="Output directory, one subdirectory per run.")
    ablate_parser.add_argument("--jobs", type=int, default=1, help="Worker processes. Default is 1.")
    ablate_parser.set_defaults(handler=command_ablate)

    evaluate_parser = commands.add_parser("evaluate", help="ATE RMSE and drift of a TUM trajectory.")
    evaluate_parser.add_argument("--est", type=str, required=True, help="Estimated trajectory, TUM format.")
    evaluate_parser.add_argument("--ref", type=str, required=True, help="Reference trajectory, TUM format.")
    evaluate_parser.set_defaults(handler=command_evaluate)

    return parser.parse_args(argv)


def run(argv=None) -> int:
    args = parse_arguments(argv)
    level = getattr(logging, args.log_level.upper(), None)
    if not isinstance(level, int):
        print(f"Unknown log level: {args.log_level}")
        return EXIT_CONFIG
    logging.getLogger().setLevel(level)

    if getattr(args, "jobs", 1) < 1:
        logger.error(f"--jobs must be at least 1, got {args.jobs}")
        return EXIT_CONFIG
    if getattr(args, "out", None):
        Path(args.out).mkdir(parents=True, exist_ok=True)

    try:
        return args.handler(args)
    except (ConfigError, ArgumentError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (DatasetFormatError, OSError) as e:
        logger.error(f"Input error: {e}")
        return EXIT_INPUT
    except PipelineError as e:
        logger.error(str(e))
        return EXIT_CONFIG if e.is_config_error else EXIT_STAGE
    except SlamError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(run())
