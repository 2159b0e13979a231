"""Command line: ``rgcmodes {simulate,rates,train,eval,report,run} --config PATH``.

Exit status is 0 on success, 2 when the configuration does not validate and
3 when a stage fails (the stage is named on standard error).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, build_config, json_schema, load_config

EXIT_CONFIG = 2
EXIT_STAGE = 3


def _parser():
    p = argparse.ArgumentParser(prog="rgcmodes", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*pipeline.STAGES, "run"):
        sp = sub.add_parser(name, help="all stages in order" if name == "run" else f"{name} stage")
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", metavar="PATH", help="YAML experiment file")
        src.add_argument("--protocol", choices=["gratings8", "gaba3", "natural"],
                         help="run a protocol with all defaults")
        sp.add_argument("--seed", type=int, help="override the top-level seed")
        sp.add_argument("--patches", help="comma-separated patch ids, e.g. t0,t4")
        sp.add_argument("--out", metavar="DIR", help="override output_dir")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "schema":
        print(json.dumps(json_schema(), indent=1))
        return 0
    overrides = {"seed": args.seed, "output_dir": args.out,
                 "patches": args.patches.split(",") if args.patches else None}
    try:
        if args.config:
            cfg = load_config(args.config, **overrides)
        else:
            cfg = build_config(dict({k: v for k, v in overrides.items() if v is not None},
                                    protocol=args.protocol))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            pipeline.run(cfg)
        else:
            pipeline.COMMANDS[args.command](cfg)
    except pipeline.StageError as err:
        print(f"stage {err.stage} failed: {err}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError) as err:
        print(f"stage {args.command} failed: {err}", file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
