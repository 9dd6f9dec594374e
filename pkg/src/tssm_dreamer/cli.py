"""Command line entry point: ``tdv3 {train,eval,plot,selftest,experiment}``."""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import harness, plots, selftest


def _train(args):
    config = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    for item in args.set or []:
        key, _, raw = item.partition("=")
        cfgmod.set_key(config, key, raw)
    if args.seed is not None:
        config.schedule = dataclasses.replace(config.schedule, seed=args.seed)
    last, ckpt, _ = harness.run_train(config, args.out)
    if last is not None:
        print(f"final env_step={last.env_step} return={last.episode_return_mean:.3f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _eval(args):
    mean, (lo, hi) = harness.evaluate(args.checkpoint, args.episodes, args.seed)
    print(f"mean return {mean:.4f}  95% CI [{lo:.4f}, {hi:.4f}]")
    return 0


def _plot(args):
    for path in plots.emit_plots(args.inputs, args.out, args.labels):
        print(path)
    return 0


def _selftest(args):
    return 0 if selftest.run(args.seed, out=sys.stdout) else 1


def _experiment(args):
    from .experiment import memory_comparison

    summary = memory_comparison(args.out, seeds=args.seeds, total_env_steps=args.steps)
    print(summary.table())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tdv3", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent from a config file")
    t.add_argument("--config", type=Path, help="key=value config file; defaults if omitted")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", type=Path, default=Path("runs/default"))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(fn=_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=_eval)

    pl = sub.add_parser("plot", help="learning-curve SVGs from metrics CSVs")
    pl.add_argument("--in", dest="inputs", nargs="+", type=Path, required=True)
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("--labels", nargs="+")
    pl.set_defaults(fn=_plot)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_selftest)

    x = sub.add_parser("experiment", help="delayed-recall backbone comparison")
    x.add_argument("--out", type=Path, default=Path("runs/memory"))
    x.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    x.add_argument("--steps", type=int, default=50_000)
    x.set_defaults(fn=_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
