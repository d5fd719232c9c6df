"""
Command line entry point: builds the subcommand tree and maps errors to exit codes
"""
import argparse
import sys
from typing import List, Optional

import structlog

from app.cli.commands import ablate, evaluate, inspect, render, run, simulate
from app.core.config import settings
from app.core.exceptions import SlamError
from app.core.logging_config import configure_logging

logger = structlog.get_logger()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.app_name,
        description="Monocular RGB SLAM with Gaussian splatting and scale-consistent pointmaps",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    parser.add_argument("--log-level", default=settings.log_level, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-format", default=settings.log_format, choices=["console", "json"])
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in (simulate, run, evaluate, render, inspect, ablate):
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level, args.log_format)
    try:
        return args.handler(args)
    except SlamError as e:
        logger.debug("Command failed", command=args.command, category=e.category)
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
