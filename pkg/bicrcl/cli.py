"""
Command-line interface

    python -m bicrcl run <config> [--seed N] [--out DIR] [--method M]
                                  [--order shuffled|reversed|given]
                                  [--resume CHECKPOINT] [--progress] [-v | -q]
    python -m bicrcl validate <config>

stdout carries one line per finished session, stderr carries logs and a
structured JSON error record on failure. Exit codes: 0 success, 1 runtime
failure, 2 invalid configuration.
"""

import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

from .config import METHODS, validate_config
from .errors import ConfigError, CRCLError
from .experiment import run_experiment, session_line, summary_lines
from .stream import ORDERS

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bicrcl",
        description='Replay-free class-incremental learning with dual learners'
    )
    parser.add_argument(
        '-v', '--verbose',
        action='store_true',
        help='Debug logging on stderr'
    )
    parser.add_argument(
        '-q', '--quiet',
        action='store_true',
        help='Only warnings and errors on stderr'
    )
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run an experiment')
    run.add_argument('config', help='Experiment INI file')
    run.add_argument('--seed', type=int, help='Override [experiment] seed')
    run.add_argument('--out', type=str, help='Override [experiment] output directory')
    run.add_argument('--method', choices=METHODS, help='Override [experiment] method')
    run.add_argument('--order', choices=ORDERS, help='Override [stream] order')
    run.add_argument('--resume', type=str, help='Continue from a session checkpoint')
    run.add_argument('--progress', action='store_true', help='Show training progress bars')

    validate = commands.add_parser('validate', help='Check a config file and report every problem')
    validate.add_argument('config', help='Experiment INI file')
    return parser


def overrides_from(args: argparse.Namespace) -> Dict[str, Dict[str, str]]:
    """Command-line flags as {section: {key: value}} config overrides"""
    overrides: Dict[str, Dict[str, str]] = {}
    flags = (("seed", "experiment", "seed"), ("out", "experiment", "output"),
             ("method", "experiment", "method"), ("order", "stream", "order"))
    for flag, section, key in flags:
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = str(value)
    return overrides


def report_error(error: CRCLError):
    print(json.dumps(error.to_record(), sort_keys=True), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = validate_config(args.config, overrides=overrides_from(args))
    except ConfigError as error:
        report_error(error)
        return EXIT_CONFIG

    if args.command == 'validate':
        print(f"✓ {args.config} is valid")
        return EXIT_OK

    def on_session(t: int, total: int, record: Dict):
        print(session_line(t, total, record), flush=True)

    try:
        outcome = run_experiment(config, resume=args.resume, progress=args.progress,
                                 on_session=on_session)
    except CRCLError as error:
        report_error(error)
        return EXIT_FAILURE

    for line in summary_lines(outcome.result):
        print(line)
    print(f"✓ Report written to {outcome.report_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
