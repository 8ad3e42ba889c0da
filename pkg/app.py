import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from models.config import load_config
from models.errors import InvalidInputError, NumericalError, ToothKitError, UsageError
from models.schemas import CommandResult
from routes.commands import CommandContext, router
from services.storage_service import StorageService
from utils.helpers import NumpyJSONEncoder

logger = logging.getLogger("toothkit")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors share the error envelope."""

    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--json", action="store_true", help="print a machine-readable envelope on stdout")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = _Parser(
        prog="toothkit",
        description="Pose-aware tooth instance segmentation toolkit for CBCT volumes",
    )
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser)
    router.install(subparsers, parents=[common])
    return parser


def configure_logging(verbose: bool, json_output: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if json_output else logging.INFO
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _emit(result: CommandResult, json_output: bool) -> None:
    if json_output:
        print(json.dumps(result.model_dump(), cls=NumpyJSONEncoder, sort_keys=True))
    elif result.success:
        print(f"✅ {result.message}")
        if result.data:
            print(json.dumps(result.data, cls=NumpyJSONEncoder, indent=2, sort_keys=True))


def _failure(error: Exception, exit_code: int, json_output: bool) -> int:
    message = error.message if isinstance(error, ToothKitError) else str(error)
    print(f"❌ {message}", file=sys.stderr)
    if json_output:
        _emit(CommandResult(
            success=False,
            message=message,
            error={"type": type(error).__name__, "exit_code": exit_code},
            timestamp=datetime.utcnow(),
        ), True)
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    load_dotenv()
    argv = list(sys.argv[1:] if argv is None else argv)
    json_output = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "handler", None):
            raise UsageError("a subcommand is required (see --help)")
        configure_logging(args.verbose, args.json)
        config = load_config(args.config, args.seed)
        context = CommandContext(
            config=config,
            storage=StorageService(Path(args.out)),
            seed_given=args.seed is not None,
        )
        logger.info("🚀 %s", args.command)
        result = args.handler(args, context)
        _emit(result, args.json)
        return EXIT_OK
    except UsageError as e:
        return _failure(e, EXIT_USAGE, json_output)
    except (InvalidInputError, ValidationError) as e:
        return _failure(e, EXIT_INVALID, json_output)
    except NumericalError as e:
        return _failure(e, EXIT_NUMERICAL, json_output)
    except ToothKitError as e:
        return _failure(e, e.exit_code, json_output)


if __name__ == "__main__":
    sys.exit(main())
