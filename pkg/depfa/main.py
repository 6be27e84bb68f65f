"""
Command-line entry point.

Results go to stdout as JSON, logs to stderr. Failures print
{"error", "module", "message", "details"} and exit with 2 (configuration),
3 (data) or 4 (sampler or factorization).
"""
import argparse
import json
import logging
import os
import sys
import traceback
from typing import List, Optional

from depfa.commands import fit, predict, schema, simulate
from depfa.services.exceptions import (
    ConfigError,
    DataError,
    DepfaError,
    FactorizationError,
    SamplerError,
    ValidationError,
)
from shared.config import settings

logger = logging.getLogger("depfa")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SAMPLER = 4


def exit_code(error: Exception) -> int:
    if isinstance(error, (ConfigError, ValidationError)):
        return EXIT_CONFIG
    if isinstance(error, DataError):
        return EXIT_DATA
    if isinstance(error, (SamplerError, FactorizationError)):
        return EXIT_SAMPLER
    return 1


def error_module(error: BaseException) -> str:
    """Name of the innermost depfa module on the traceback."""
    module = "depfa"
    for frame in traceback.extract_tb(error.__traceback__):
        parts = os.path.normpath(frame.filename).split(os.sep)
        if "depfa" in parts:
            module = os.path.splitext(parts[-1])[0]
    return module


def error_payload(error: Exception) -> dict:
    return {
        "error": type(error).__name__,
        "module": error_module(error),
        "message": str(error),
        "details": getattr(error, "details", {}) or {},
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depfa", description="Dependent feature allocation on GMRF priors")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in (fit, predict, simulate, schema):
        module.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        result = args.handler(args)
    except DepfaError as e:
        logger.error(f"command failed: command={args.command} error={type(e).__name__} message={e}")
        print(json.dumps(error_payload(e), default=str))
        return exit_code(e)
    except Exception as e:
        logger.exception(f"command crashed: command={args.command}")
        print(json.dumps(error_payload(e), default=str))
        return 1
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
