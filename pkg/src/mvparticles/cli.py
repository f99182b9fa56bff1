"""Command line entry point.

Exit codes: 0 success (a diverged run is a valid result), 1 config error,
2 implicit solve failure, 3 an assumption check failed, 4 some figure
recipes failed (the rest are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import COMMANDS, RUNNERS, ConfigError, load_config, resolve_config
from .scheme import ImplicitSolveFailure

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK, EXIT_FIGURES = 0, 1, 2, 3, 4

_HELP = {
    "simulate": "run one particle system and write its statistics",
    "rate": "empirical stability rates against the rate equations over a stepsize sweep",
    "chaos": "coupled-error decay in the particle count",
    "check": "sampled check of the model's declared constants",
    "control": "feedback model without and with discrete-time control",
    "figures": "all twelve canned figure recipes",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvparticles", description="Interacting particle experiments for mean-field SDEs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", help="JSON config file (missing fields take defaults)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads over paths (results do not depend on it)")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        user = load_config(args.config) if args.config else {}
        cfg = resolve_config(args.command, user, seed=args.seed)
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        outcome = RUNNERS[args.command](cfg, args.out, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ImplicitSolveFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command == "check":
        for line in outcome.summary["table"]:
            print(line)
    else:
        print(json.dumps(outcome.summary, indent=2, sort_keys=True, default=str))
    for path in outcome.files:
        print(f"wrote {path}", file=sys.stderr)
    if outcome.failed:
        return EXIT_CHECK if args.command == "check" else EXIT_FIGURES
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
