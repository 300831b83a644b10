"""Command line entry point: ``protofed run`` and ``protofed partition-stats``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import parse_config
from .data import PartitionSpec, dirichlet_partition, load_idx, subsample
from .errors import ConfigError, InvalidInputError, ParseError, ProtoFedError
from .runner import run

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("protofed")


def _overrides(args: argparse.Namespace) -> dict:
    out = {
        "alpha": args.alpha,
        "rounds": args.rounds,
        "seed": args.seed,
        "strategies": args.strategies,
        "out_dir": getattr(args, "out", None),
    }
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(item, "--set expects KEY=VALUE")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, _overrides(args))
    cfg.data_paths()
    summary = run(cfg)
    acc = summary["final_accuracy"]
    for name in ("local", "fedavg", "protofed"):
        v = acc.get(name)
        if isinstance(v, dict):
            v = v["mean"]
        if v is not None:
            print(f"{name:9s} final accuracy {v:.4f}")
    print(f"results written to {cfg.out_dir}")
    return EXIT_OK


def cmd_partition_stats(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, _overrides(args))
    paths = cfg.data_paths()
    train = load_idx(paths["train_images"], paths["train_labels"])
    pool = subsample(train, cfg.pool_size, cfg.seed)
    shards = dirichlet_partition(
        pool.labels, PartitionSpec(cfg.n_clients, cfg.alpha, cfg.pool_size, cfg.seed), pool.class_count
    )
    width = max(5, len(str(cfg.pool_size)))
    print("client " + " ".join(f"{j:>{width}d}" for j in range(pool.class_count)) + f" {'total':>{width}s}")
    for s in shards:
        print(f"{s.client_id:6d} " + " ".join(f"{c:>{width}d}" for c in s.class_counts) + f" {s.size:>{width}d}")
    totals = np.sum([s.class_counts for s in shards], axis=0)
    print("   all " + " ".join(f"{c:>{width}d}" for c in totals) + f" {cfg.pool_size:>{width}d}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protofed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--alpha", type=float)
        p.add_argument("--rounds", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--strategies", help="comma list of local,fedavg,protofed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p_run = sub.add_parser("run", help="run an experiment")
    common(p_run)
    p_run.add_argument("--out", help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_stats = sub.add_parser("partition-stats", help="print per-client class histograms")
    common(p_stats)
    p_stats.set_defaults(func=cmd_partition_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"protofed: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ParseError) as exc:
        print(f"protofed: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ProtoFedError as exc:
        print(f"protofed: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
