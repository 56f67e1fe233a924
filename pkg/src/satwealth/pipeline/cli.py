"""Command-line entry point: ``satwealth <stage> --config cfg.json [--seed N] [--workdir P]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import SatwealthError
from .config import PipelineConfig
from .stages import COMMANDS, STAGES

log = logging.getLogger("satwealth")

EXIT_OK = 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satwealth", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    for name in STAGES + ("all",):
        sp = sub.add_parser(name, help="run every stage in order" if name == "all" else f"run the {name} stage")
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--workdir", help="working directory (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config, seed=args.seed, workdir=args.workdir)
        stages = STAGES if args.stage == "all" else (args.stage,)
        for name in stages:
            manifest = COMMANDS[name](cfg)
            print(f"{name}: {json.dumps(manifest['summary'], sort_keys=True)}")
    except SatwealthError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
