"""Command-line entry point: train, compare, inspect-partition."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .core import make_partition
from .harness import ConfigError, compare, load_config, run_experiment
from .model import MlpSpec


def _apply_overrides(config, args):
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    if args.out_dir is not None:
        config = replace(config, out_dir=args.out_dir)
    return config


def _cmd_train(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    result = run_experiment(config)
    last = result.trials[-1].records[-1]
    print(f"{config.label}: {config.trials} trial(s), {config.epochs} epoch(s)")
    print(
        f"final train_loss={last.train_loss:.6f} "
        f"test_accuracy={last.test_accuracy:.4f}"
    )
    for path in result.trial_paths:
        print(f"wrote {path}")
    print(f"wrote {result.summary_path}")
    return 0


def _cmd_compare(args) -> int:
    configs = [load_config(path) for path in args.configs]
    configs = [_apply_overrides(c, args) for c in configs]
    path = compare(configs, out_dir=args.out_dir)
    print(f"wrote {path}")
    return 0


def _cmd_inspect_partition(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    spec = MlpSpec(config.model_widths, seed=config.master_seed)
    partition = make_partition(spec.segment_count, config.subdomains, config.master_seed)
    segments = spec.segments()
    owner = {}
    for subdomain, group in enumerate(partition.assignment):
        for index in group:
            owner[index] = subdomain
    print(f"{spec.segment_count} segments across {config.subdomains} subdomains")
    for index, segment in enumerate(segments):
        print(
            f"segment {index:2d} {segment.name:<16} len={segment.length:<6} "
            f"-> subdomain {owner[index]}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apts",
        description="Additively preconditioned trust-region training experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one experiment config")
    train.add_argument("config")
    train.set_defaults(func=_cmd_train)

    cmp_cmd = sub.add_parser("compare", help="run several configs on shared data")
    cmp_cmd.add_argument("configs", nargs="+")
    cmp_cmd.set_defaults(func=_cmd_compare)

    inspect = sub.add_parser(
        "inspect-partition", help="print the segment -> subdomain map"
    )
    inspect.add_argument("config")
    inspect.set_defaults(func=_cmd_inspect_partition)

    for p in (train, cmp_cmd, inspect):
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--epochs", type=int, default=None, help="override epoch count")
        p.add_argument("--out-dir", default=None, help="override output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
