"""Command line entry point: ``mmctta <command> [options]``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import config as config_mod
from . import harness
from .adapter import MethodVariant
from .errors import ConfigError


def _load(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if getattr(args, "seed", None):
        cfg = replace(cfg, seeds=tuple(args.seed))
    if getattr(args, "variant", None):
        cfg = replace(cfg, variants=tuple(MethodVariant(v) for v in args.variant))
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "workers", None):
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = replace(cfg, workers=args.workers)
    return cfg


def cmd_config(args) -> int:
    if args.defaults:
        sys.stdout.write(config_mod.dumps(config_mod.ExperimentConfig()))
    elif args.config:
        sys.stdout.write(config_mod.dumps(config_mod.load(args.config)))
    else:
        raise ConfigError("config: pass --defaults or --config FILE")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    for seed, acc in harness.pretrain_report(cfg).items():
        print(f"seed {seed}: holdout accuracy 2d={acc['2d']:.4f} 3d={acc['3d']:.4f}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load(args)
    records = harness.run_experiment(cfg)
    for rec in records:
        if rec.failed:
            print(f"{rec.label:12s} seed {rec.seed}: FAILED {rec.error}")
        else:
            print(f"{rec.label:12s} seed {rec.seed}: accuracy {rec.overall.accuracy:.4f} "
                  f"mIoU {rec.overall.miou:.4f} ({rec.wall_clock:.1f}s)")
    print(f"wrote {cfg.output_dir}/summary.csv")
    return 1 if any(r.failed for r in records) else 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    tables = harness.ablate(cfg)
    for name in tables:
        print(f"wrote {cfg.output_dir}/ablation_{name}.csv")
    return 0


def cmd_report(args) -> int:
    out = args.out or config_mod.ExperimentConfig().output_dir
    sys.stdout.write(harness.report(out, args.metric))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmctta", description="Multi-modal continual test-time adaptation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, runs=True):
        sp.add_argument("--config", help="INI experiment file (defaults apply to missing keys)")
        sp.add_argument("--out", help=f"output directory (default: ${config_mod.OUT_ENV} or ./results)")
        sp.add_argument("--seed", type=int, action="append", help="seed to run; repeat for several")
        if runs:
            sp.add_argument("--workers", type=int, help="parallel worker processes")

    sp = sub.add_parser("config", help="print the default or a resolved configuration")
    sp.add_argument("--defaults", action="store_true", help="print every key with its default value")
    sp.add_argument("--config", help="INI file to resolve and print")
    sp.set_defaults(func=cmd_config)

    sp = sub.add_parser("pretrain", help="pretrain source models and report holdout accuracy")
    common(sp, runs=False)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="run variants over seeds and write summary files")
    common(sp)
    sp.add_argument("--variant", action="append", choices=[v.value for v in MethodVariant],
                    help="variant to run; repeat for several")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("ablate", help="augmentation grid and parameter sweeps from [ablate]")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="tabulate summary.csv and draw chart.svg")
    sp.add_argument("--out", help="directory holding summary.csv")
    sp.add_argument("--metric", choices=("miou", "accuracy"), default="miou")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("selftest", help="quick invariant checks")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
