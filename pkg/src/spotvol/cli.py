#!/usr/bin/env python3

import argparse
import logging
import sys
from typing import Any, NoReturn, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from . import __version__
from .config import config_reference, load_run_config
from .errors import SpotVolError
from .workflow import ExperimentWorkflow

EXIT_USAGE = 1
EXIT_NUMERICAL = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

DEFAULT_OUTPUTS = {
    "simulate": "path.csv",
    "filter": "estimates.csv",
    "local-linear": "local_linear.csv",
    "curves": "./outputs",
    "table1": "./outputs",
    "table2": "./outputs",
}


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser that exits with the usage status instead of argparse's 2."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common_arguments(parser: argparse.ArgumentParser, out_help: str) -> None:
    parser.add_argument("--config", "-c", type=str, help="INI configuration file")
    parser.add_argument("--seed", type=int, help="Root seed (overrides [sim] seed)")
    parser.add_argument("--out", "-o", type=str, help=out_help)
    parser.add_argument(
        "--workers", type=int, help="Worker processes for experiments (default: CPUs)"
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration key (repeatable)",
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug output")


def create_parser() -> argparse.ArgumentParser:
    """Create and configure argument parser."""
    parser = ArgumentParser(
        prog="spotvol",
        description="Spot volatility filtering and Monte Carlo experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"spotvol {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    commands = {
        "simulate": "Simulate one scenario and write it as t,x CSV",
        "filter": "Estimate drift and theta, filter a path CSV",
        "local-linear": "Local linear kernel volatility estimates for a path CSV",
        "curves": "Volatility-curve recovery study",
        "table1": "Out-of-sample RMSE study",
        "table2": "Realized minus integrated volatility study",
    }
    epilog = config_reference()
    for name, help_text in commands.items():
        sub = subparsers.add_parser(
            name,
            help=help_text,
            description=help_text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        if name in ("filter", "local-linear"):
            sub.add_argument(
                "--input", "-i", required=True, type=str, help="Path CSV (t,x)"
            )
        file_output = name in ("simulate", "filter", "local-linear")
        out_kind = "file" if file_output else "directory"
        _add_common_arguments(
            sub, f"Output {out_kind} (default: {DEFAULT_OUTPUTS[name]})"
        )
    return parser


def run_command(args: argparse.Namespace) -> dict[str, Any]:
    config = load_run_config(
        args.config, args.overrides, seed=args.seed, workers=args.workers
    )
    workflow = ExperimentWorkflow(config)
    out = args.out or DEFAULT_OUTPUTS[args.command]

    if args.command == "simulate":
        return workflow.simulate(out)
    if args.command == "filter":
        return workflow.filter_file(args.input, out)
    if args.command == "local-linear":
        return workflow.local_linear_file(args.input, out)
    if args.command == "curves":
        return workflow.save_curves(out)
    return workflow.save_tables(args.command, out)


def main(argv: Optional[list[str]] = None) -> None:
    """Main CLI entry point."""
    # Load SPOTVOL_* variables from a .env file
    load_dotenv()

    parser = create_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )

    try:
        result = run_command(args)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    except SpotVolError as e:
        _report_error(e, args.debug)
        sys.exit(EXIT_NUMERICAL)
    except (ValueError, ValidationError, OSError) as e:
        _report_error(e, args.debug)
        sys.exit(EXIT_USAGE)

    print("Files created:")
    for label, file_path in result["file_paths"].items():
        print(f"  - {label}: {file_path}")


def _report_error(error: Exception, debug: bool) -> None:
    print(f"Error: {error}", file=sys.stderr)
    if debug:
        import traceback

        traceback.print_exc()


if __name__ == "__main__":
    main()
