"""Command line: ``sfcsim validate | run | compare``.

Exit codes: 0 success, 1 the scenario or bundle failed validation,
2 the run itself failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .errors import ParseError, PresetPreconditionFailed, SchemaError, SfcSimError
from .experiments import PRESETS, ReportBundle, compare, run_experiment
from .scenario import load

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

logger = logging.getLogger("sfcsim")


def _cmd_validate(args) -> int:
    scn = load(args.scenario)
    print(f"{args.scenario}: ok ({len(scn.topology['pops'])} POPs, {len(scn.chains)} chains, "
          f"{len(scn.traffic)} flows)")
    return EXIT_OK


def _cmd_run(args) -> int:
    scn = load(args.scenario)
    bundle = run_experiment(scn, args.preset, args.seed)
    if args.out:
        for path in bundle.write(args.out):
            logger.info("wrote %s", path)
        print(f"report bundle written to {args.out}")
    else:
        print(json.dumps(bundle.summary, sort_keys=True, indent=2, default=str))
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        a = ReportBundle.read(args.a)
        b = ReportBundle.read(args.b)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read bundle: {exc}", file=sys.stderr)
        return EXIT_INVALID
    diff = compare(a, b)
    for w in diff["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps(diff, sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfcsim",
                                     description="Service function chain simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("scenario")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("run", help="run a scenario and export its report bundle")
    p.add_argument("scenario")
    p.add_argument("--preset", choices=PRESETS, default=None,
                   help="experiment preset (default: the scenario's own)")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", default=None, help="directory for report.json and CSV files")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="per-metric deltas b - a between two bundles")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ParseError, SchemaError, PresetPreconditionFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SfcSimError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
