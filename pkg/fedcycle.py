"""Command-line entry point for fedcycle experiments.

Usage:
    python fedcycle.py run --config experiment.yaml [--jobs N] [--seed S] [--out DIR]
    python fedcycle.py validate --config experiment.yaml

Exit codes: 0 success, 1 config error, 2 divergence, 3 I/O error.
"""

import argparse
import sys
from typing import List, Optional

from src.config import ConfigError, apply_overrides, dump_config, load_config
from src.experiment import EXIT_CONFIG, EXIT_IO, OutputError, exit_code_for, run_experiment
from src.logger import get_logger, setup_logging

logger = get_logger(__name__)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with the run and validate subcommands."""
    parser = argparse.ArgumentParser(
        prog="fedcycle",
        description="Federated learning simulator with cyclic server aggregation",
    )
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    parser.add_argument("--log-dir", default="logs", help="Directory of the rotating log file")
    subcommands = parser.add_subparsers(dest="command", required=True)

    run = subcommands.add_parser("run", help="Run an experiment")
    run.add_argument("--config", required=True, help="YAML experiment document")
    run.add_argument("--jobs", type=int, default=None, help="Runs executed in parallel")
    run.add_argument("--seed", type=int, default=None, help="Override master_seed")
    run.add_argument("--out", default=None, help="Override experiment.output_dir")

    validate = subcommands.add_parser("validate", help="Validate a config and print its echo")
    validate.add_argument("--config", required=True, help="YAML experiment document")
    return parser


def run_command(args: argparse.Namespace) -> int:
    """
    Execute a parsed command.

    Returns:
        Process exit status.
    """
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            print(dump_config(cfg), end="")
            logger.info(f"Config {args.config} is valid")
            return 0
        cfg = apply_overrides(cfg, seed=args.seed, output_dir=args.out, jobs=args.jobs)
        result = run_experiment(cfg)
        return result.exit_code
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (OSError, OutputError) as e:
        logger.error(f"I/O error: {e}", exc_info=True)
        return EXIT_IO
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"Experiment failed: {e}", exc_info=True)
        return code


def main(argv: Optional[List[str]] = None) -> int:
    """Main application function."""
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level, args.log_dir)
    except ValueError as e:
        print(f"fedcycle: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return run_command(args)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        sys.exit(130)
