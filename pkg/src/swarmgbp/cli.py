"""Command line interface: run, sweep and seeds subcommands."""
from __future__ import annotations

import argparse
import json
import sys

from .harness import (
    SwarmConfig,
    parse_override,
    run_experiment,
    seed_robot_study,
    sweep,
)


def _parse_values(text: str):
    return [json.loads(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmgbp",
        description="Swarm consensus experiments (formation, exploration, "
                    "best-of-N decisions).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="master RNG seed")
        p.add_argument("--trials", type=int, help="number of trials")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="config override")

    run_p = sub.add_parser("run", help="run one experiment")
    common(run_p)

    sweep_p = sub.add_parser("sweep", help="sweep one config field")
    common(sweep_p)
    sweep_p.add_argument("--axis", required=True, help="config field to vary")
    sweep_p.add_argument("--values", required=True,
                         help="comma-separated values")

    seeds_p = sub.add_parser("seeds", help="seed-robot proportion study")
    common(seeds_p)
    seeds_p.add_argument("--zetas", required=True,
                         help="comma-separated seed proportions")
    return parser


def load_config(args) -> SwarmConfig:
    if args.config:
        config = SwarmConfig.from_json(args.config)
    else:
        config = SwarmConfig()
    overrides = {}
    for text in args.overrides:
        key, value = parse_override(text)
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.trials is not None:
        overrides["trials"] = args.trials
    if overrides:
        config = config.with_overrides(overrides)
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            summary = run_experiment(config, out_dir=args.out)
            print(json.dumps(
                {k: summary[k] for k in
                 ("mode", "convergence_rate", "mean_iterations")},
                indent=2,
            ))
        elif args.command == "sweep":
            rows = sweep(config, args.axis, _parse_values(args.values),
                         out_dir=args.out)
            print(f"wrote {len(rows)} sweep rows to {args.out}/sweep.csv")
        elif args.command == "seeds":
            rows = seed_robot_study(config, _parse_values(args.zetas),
                                    out_dir=args.out)
            for row in rows:
                print(f"zeta={row['zeta']}: {row['pct_converged']:.1f}% "
                      f"converged")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
