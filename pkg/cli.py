import argparse
import sys
from typing import List, Optional

from pydantic import ValidationError

from handlers import flows, meanfield, sinkhorn, training
from handlers.router import Router
from services.errors import SinkformerError
from utils.logger import logger

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def build_router() -> Router:
    router = Router()
    router.include_router(sinkhorn.router)
    router.include_router(flows.router)
    router.include_router(meanfield.router)
    router.include_router(training.router)
    return router


def build_parser(router: Router) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sinkformers",
        description="Sinkhorn attention experiments; every command writes its outputs and resolved config.",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    for command in router.commands.values():
        command.add_to(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    router = build_router()
    parser = build_parser(router)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    command = router.commands[args.command]
    try:
        cfg = command.resolve(args)
    except ValidationError as e:
        logger.error(f"Invalid configuration for '{args.command}': {e}")
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        logger.error(f"Cannot read config file {args.config}: {e}")
        return EXIT_RUNTIME

    try:
        return command.run(cfg)
    except (SinkformerError, OSError) as e:
        logger.error(f"'{args.command}' failed: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


def run_experiment(name: str, *flags: str) -> int:
    """Run one command as if invoked as `sinkformers <name> <flags...>`; returns the exit status."""
    return main([name, *flags])


if __name__ == "__main__":
    sys.exit(main())
