"""Command-line interface: ``train``, ``run``, ``oracle`` and ``report``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness as hx
from .baselines import OracleTooLarge, exhaustive_oracle
from .config import ConfigError
from .gdbn import GenerativeModel, dumps_canonical
from .phy import channel_gains, check_constraints
from .scenario import generate_episode


def _spec(args, **extra):
    seeds = None if getattr(args, "seed", None) is None else (args.seed,)
    return hx.load_spec(args.config, seeds=seeds, episodes=getattr(args, "episodes", None),
                        policy=getattr(args, "policy", None), **extra)


def cmd_train(args) -> int:
    spec = _spec(args)
    out = Path(args.out or "model.json")
    hx.train_offline(spec, path=out)
    print(f"model written to {out}")
    return 0


def cmd_run(args) -> int:
    spec = _spec(args)
    if args.model:
        model = GenerativeModel.load(args.model)
    else:
        model = hx.train_offline(spec)
    metrics, summary = hx.run_experiment(spec, model)
    out = Path(args.out or f"metrics.{args.format}")
    hx.emit_metrics(metrics, args.format, out)
    print(hx.report_table(summary))
    print(f"metrics written to {out}")
    return 0


def cmd_oracle(args) -> int:
    spec = _spec(args)
    config = spec.config
    seed = spec.seeds[0]
    world = generate_episode(config, seed, 0)
    t = args.slot
    gains = channel_gains(world.su.positions[t], world.uav.position(t), config)
    occ = world.pu.occupied[t]
    grid = np.linspace(0.0, config.p_max, args.levels)
    action, value = exhaustive_oracle(gains, config, grid, occupied=occ)
    report = check_constraints(action.allocation, world.uav, config, gains)
    doc = {"seed": seed, "slot": t, "occupied": [bool(v) for v in occ],
           "b": np.asarray(action.b).tolist(), "p": np.asarray(action.p).tolist(),
           "sum_rate": value, "violations": report.violations,
           "sic_unreliable": report.sic_unreliable}
    text = dumps_canonical(doc)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    metrics = []
    for path in args.metrics:
        metrics.extend(hx.load_metrics(path))
    summary = hx.summarize(metrics)
    print(hx.report_table(summary))
    if "agent" in summary and "random" in summary:
        print(f"agent > random, one-sided Mann-Whitney p = {hx.compare(summary, 'agent', 'random'):.4g}")
    if args.out:
        if args.format == "json":
            Path(args.out).write_text(dumps_canonical(summary))
        else:
            hx.write_plot_csv(summary, args.out)
        print(f"summary written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uavnoma", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, policy=False, episodes=False):
        p.add_argument("--config", help="key-value config file ([scenario], [experiment], [agent])")
        p.add_argument("--seed", type=int, help="single seed (overrides the config's seed list)")
        p.add_argument("--out", help="output path")
        if policy:
            p.add_argument("--policy", choices=hx.POLICIES)
        if episodes:
            p.add_argument("--episodes", type=int)

    p = sub.add_parser("train", help="learn the generative model offline")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run online episodes and write per-slot metrics")
    common(p, policy=True, episodes=True)
    p.add_argument("--model", help="model file from 'train' (trained on the fly if omitted)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="exhaustive optimum for one slot of a tiny instance")
    common(p)
    p.add_argument("--slot", type=int, default=0)
    p.add_argument("--levels", type=int, default=3, help="power grid size on [0, p_max]")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="summarize metric files")
    p.add_argument("metrics", nargs="+", help="metric files written by 'run'")
    p.add_argument("--out", help="plot-ready per-episode CSV (or JSON summary)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, hx.SpecError, OracleTooLarge, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
