"""``mergelab`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from .. import interventions as iv
from ..errors import MergeLabError
from ..transformer import VITB32
from .config import STAGES, default_config, load_config
from .experiment import run_experiment

# (label, spec) rows of the ViT-B/32-scale extra-parameter table
PARAM_ROWS = (
    ("P4 r=1, all 12 blocks", iv.InterventionSpec("P4", 1)),
    ("P4 r=1, last block", iv.InterventionSpec("P4", 1, blocks=(12,))),
    ("P4 r=4, all 12 blocks", iv.InterventionSpec("P4", 4)),
    ("P1 r=1 mini [0:64), all 12 blocks", iv.InterventionSpec("P1", 1, slice=(0, 64))),
    ("Surgery r=16", iv.InterventionSpec("SURGERY", 16)),
)


def params_table(T: int = 8) -> list[tuple[str, int]]:
    cfg = VITB32
    return [(label, iv.count_extra_params(spec, T, cfg.num_blocks, cfg.dim)) for label, spec in PARAM_ROWS]


def _overrides(args) -> dict[str, str]:
    out = {}
    if args.seed is not None:
        out["experiment.seed"] = str(args.seed)
    if args.out is not None:
        out["experiment.out"] = args.out
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mergelab", description="Model merging with representation interventions.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run",) + STAGES:
        p = sub.add_parser(name, help="run the configured stages" if name == "run" else f"run the {name} stage")
        p.add_argument("--config", help="key = value config file (defaults when omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="experiment directory")
        if name == "run":
            p.add_argument("--stage", help="comma-separated stages to run")
    p = sub.add_parser("params", help="extra-parameter counts at ViT-B/32 scale")
    p.add_argument("--tasks", type=int, default=8)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "params":
            for label, n in params_table(args.tasks):
                print(f"{label:<40} {n:>10,}")
            return 0
        overrides = _overrides(args)
        if args.config:
            config = load_config(args.config, overrides)
        else:
            config = default_config(**_typed(overrides))
        if args.command == "run":
            stages = args.stage.split(",") if args.stage else None
            bad = [s for s in stages or () if s not in STAGES]
            if bad:
                print(f"error: unknown stage(s) {', '.join(bad)}", file=sys.stderr)
                return 2
        else:
            stages = [args.command]
        out = run_experiment(config, stages)
        print(out)
        return 0
    except MergeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _typed(overrides: dict[str, str]) -> dict:
    return {k: int(v) if k == "experiment.seed" else v for k, v in overrides.items()}


if __name__ == "__main__":
    sys.exit(main())
