"""Command-line entry point: ``diffpf <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import load_config, parse_overrides
from .data import generate_dataset, read_dataset, write_dataset
from .exceptions import DataError, NumericError, UsageError
from .maze import PRESETS, NoiseSpec, build_maze

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args):
    overrides = parse_overrides(args.set or [])
    if getattr(args, "scheme", None):
        overrides["scheme"] = args.scheme
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_gen_data(args):
    noise = NoiseSpec(sigma_a=args.sigma_a, sigma_o=args.sigma_o)
    ds = generate_dataset(build_maze(args.maze), args.policy, args.episodes, args.steps, noise, args.seed, args.K)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} episodes to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    est = harness.train(cfg)
    print(json.dumps({"checkpoint": cfg.checkpoint, "metrics": cfg.metrics, "stages": est.stages_}))


def cmd_baseline_train(args):
    cfg = _config(args)
    est = harness.train_baseline(cfg)
    print(json.dumps({"checkpoint": cfg.checkpoint, "metrics": cfg.metrics, "stages": est.stages_}))


def cmd_eval(args):
    report = harness.evaluate(args.checkpoint, read_dataset(args.data), args.particles, args.seed)
    out = report.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=1)
    print(json.dumps({k: out[k] for k in ("error_rate", "mean_distance", "n_episodes", "wall_clock")}))


def cmd_curve(args):
    cfg = _config(args)
    rows = harness.learning_curve(cfg)
    harness.write_csv(cfg.out, rows, harness.CURVE_FIELDS, cfg, "learning_curve")
    print(f"wrote {len(rows)} rows to {cfg.out}")


def cmd_cross_policy(args):
    cfg = _config(args)
    rows = harness.cross_policy(cfg)
    harness.write_csv(cfg.out, rows, harness.CROSS_FIELDS, cfg, "cross_policy")
    print(f"wrote {len(rows)} rows to {cfg.out}")


def cmd_dump_belief(args):
    n = harness.dump_belief(args.checkpoint, read_dataset(args.data), args.episode, args.out,
                            args.particles, args.seed)
    print(f"wrote {n} steps to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffpf", description="Differentiable particle filters on synthetic mazes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="simulate episodes and write a dataset file")
    g.add_argument("--maze", type=int, choices=sorted(PRESETS), required=True)
    g.add_argument("--policy", choices=["A", "B"], required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--steps", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--K", type=int, default=5, help="depth rays per observation")
    g.add_argument("--sigma-a", type=float, default=0.1, help="odometry noise")
    g.add_argument("--sigma-o", type=float, default=0.1, help="depth noise")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def configured(name, func, help_, scheme=False):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="key = value config file")
        c.add_argument("--seed", type=int)
        c.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        if scheme:
            c.add_argument("--scheme", choices=["ind", "e2e", "ind+e2e"])
        c.set_defaults(func=func)

    configured("train", cmd_train, "train a particle filter", scheme=True)
    configured("baseline-train", cmd_baseline_train, "train the recurrent baseline")
    configured("curve", cmd_curve, "learning curve over training-set sizes")
    configured("cross-policy", cmd_cross_policy, "train/test across data-collection policies")

    for name, help_ in (("eval", "evaluate a checkpoint"), ("baseline-eval", "evaluate a baseline checkpoint")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--particles", type=int, default=None)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out", help="write the full report as JSON")
        e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-belief", help="write per-step particle beliefs of one episode")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--episode", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--particles", type=int, default=None)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_dump_belief)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        args.func(args)
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
