import argparse
import sys
from typing import Callable, Optional, Sequence

from balweights.helpers.logger import LOGGER

FORMATS = ("json", "text")


class CommandRouter:
    """Registry of subcommands; modules register handlers with the command decorator."""

    def __init__(self, prog: str = "balweights"):
        self.prog = prog
        self.handlers = {}

    def command(self, name: str, help: str = ""):
        def decorator(func: Callable):
            if name in self.handlers:
                raise ValueError(f"command {name!r} is registered twice")
            self.handlers[name] = (func, help)
            return func
        return decorator

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog=self.prog, description="Balancing weights for causal effect estimation.")
        parser.add_argument("--version", action="store_true", help="print the toolkit version and exit")
        sub = parser.add_subparsers(dest="command")
        for name in sorted(self.handlers):
            _, help_text = self.handlers[name]
            cmd = sub.add_parser(name, help=help_text)
            cmd.add_argument("--data", default=None, help="input CSV")
            cmd.add_argument("--config", default=None, help="JSON run configuration")
            cmd.add_argument("--out", default=None, help="output directory")
            cmd.add_argument("--seed", type=int, default=None)
            cmd.add_argument("--threads", type=int, default=None)
            cmd.add_argument("--format", choices=FORMATS, default=None)
        return parser

    def dispatch(self, argv: Optional[Sequence[str]] = None) -> int:
        from balweights import __version__
        from balweights.helpers.runconfig import RunConfig
        from balweights.helpers.defend import EXIT_INPUT
        from balweights.helpers.notify import report_failure

        parser = self.build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            # argparse exits with 2 on bad flags, which is reserved for non-convergence
            return EXIT_INPUT if e.code else 0
        if args.version:
            print(__version__)
            return 0
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_INPUT
        func, _ = self.handlers[args.command]
        try:
            run = RunConfig.resolve(args.command, args)
        except (ValueError, OSError) as e:
            report_failure(args.command, e, {"config": args.config})
            return EXIT_INPUT
        LOGGER.info(f"Running {args.command} with seed {run.seed} on {run.threads} threads")
        return func(run)
