"""Command-line entry point: single runs and domain-size sweeps to CSV."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import ConfigError, ScenarioConfig, parse_config
from .runner import render_csv, sweep


def parse_sweep_spec(spec: str) -> list[int]:
    try:
        start, stop, step = (int(part) for part in spec.split(":"))
    except ValueError:
        raise ConfigError(f"sweep spec must be start:stop:step, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise ConfigError(f"sweep spec must ascend, got {spec!r}")
    return list(range(start, stop + 1, step))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coapsim",
        description="Simulate a single-hop CoAP IoT domain behind a caching proxy.")
    parser.add_argument("--config", type=Path, help="key = value scenario file")
    parser.add_argument("--scheme", help="post-get, mget, observe-get or idle; "
                                         "comma-separated list sweeps several schemes")
    parser.add_argument("--nodes", type=int, help="domain size")
    parser.add_argument("--sweep", help="domain-size sweep as start:stop:step, e.g. 50:500:50")
    parser.add_argument("--seeds", type=int, default=1, help="seeds per sweep point")
    parser.add_argument("--seed", type=int, help="base seed")
    parser.add_argument("--duration", type=float, help="simulated seconds")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    parser.add_argument("--out", type=Path, help="CSV output path (default stdout)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ScenarioConfig()
        if args.config is not None:
            config = parse_config(args.config.read_text(), base=config)
        overrides = {}
        if args.nodes is not None:
            overrides["n_nodes"] = args.nodes
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.duration is not None:
            overrides["sim_duration_s"] = args.duration
        schemes = None
        if args.scheme is not None:
            schemes = [s.strip() for s in args.scheme.split(",") if s.strip()]
            overrides["scheme"] = schemes[0]
        if overrides:
            config = dataclasses.replace(config, **overrides).validate()

        n_list = parse_sweep_spec(args.sweep) if args.sweep else [config.n_nodes]
        rows = sweep(config, n_list, seeds_per_point=args.seeds,
                     schemes=schemes, jobs=args.jobs)
        extra = {"n_list": " ".join(str(n) for n in n_list),
                 "seeds_per_point": args.seeds,
                 "schemes": " ".join(schemes or [config.scheme])}
        text = render_csv(rows, config, extra)
    except ConfigError as error:
        print(f"error: {error}", file=sys.stderr)
        return 2
    if args.out is not None:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
