"""Command line front end: ``fedsim run|compare|metrics|partition|worker``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from fedsim.aggregation import STRATEGIES
from fedsim.errors import FedSimError
from fedsim.experiment import (
    ExperimentConfig,
    RunContext,
    compare_strategies,
    read_decodes,
    run_client,
    run_experiment,
    run_server,
)
from fedsim.metrics import evaluate_corpus, write_metrics_csv, write_metrics_json


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if getattr(args, "store_root", None):
        changes["store_root"] = args.store_root
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "strategy", None):
        changes["aggregator"] = dataclasses.replace(cfg.aggregator, strategy=args.strategy)
    if getattr(args, "run_id", None):
        changes["run_id"] = args.run_id
    if changes:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **changes})
    return cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    cfg = _load(args)
    summary = run_experiment(cfg, args.mode)
    rows = summary["round_results"]
    for r in rows:
        print(f"round {r['round']}: global val loss {r['global_val_loss']:.4f}  digest {r['global_digest'][:12]}")
    print("metrics:", ", ".join(f"{k}={v:.4f}" for k, v in summary["metrics"].items()))
    print(f"artifacts in {RunContext(cfg).run_dir}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    strategies = args.strategies.split(",") if args.strategies else ["fedavg-weighted", "krum", "l-fedavg"]
    rows = compare_strategies(cfg, strategies, args.mode)
    cols = ["rouge1_f1", "rouge2_f1", "rouge3_f1", "rouge4_f1", "rougeL_f1", "bleu", "final_val_loss"]
    print(f"{'approach':<16}" + "".join(f"{c:>16}" for c in cols))
    for r in rows:
        print(f"{r['approach']:<16}" + "".join(f"{r[c]:>16.4f}" for c in cols))
    return 0


def cmd_metrics(args) -> int:
    cfg = _load(args)
    run_dir = RunContext(cfg).run_dir
    pairs = read_decodes(run_dir / "decodes.csv")
    report = evaluate_corpus(pairs, cfg.bleu_max_n)
    write_metrics_json(run_dir / "metrics.json", report)
    write_metrics_csv(run_dir / "metrics.csv", [(cfg.aggregator.strategy, report.corpus)])
    _print_json(report.corpus)
    return 0


def cmd_partition(args) -> int:
    cfg = _load(args)
    train, val = RunContext(cfg).shards()
    for k, (tr, va) in enumerate(zip(train, val), start=1):
        print(f"client {k}: train {len(tr)}  validation {len(va)}")
    return 0


def cmd_worker(args) -> int:
    cfg = _load(args)
    if args.role == "server":
        run_server(cfg)
    else:
        if args.client_id is None:
            raise SystemExit("--client-id is required for the client role")
        run_client(cfg, args.client_id)
    return 0


def cmd_default_config(args) -> int:
    _print_json(ExperimentConfig().to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--store-root", help="directory holding runs/ (overrides config)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--strategy", choices=STRATEGIES, help="aggregation strategy (overrides config)")
        p.add_argument("--run-id", help="run identifier (overrides config)")
        if mode:
            p.add_argument("--mode", choices=("inprocess", "multiprocess"), default="inprocess")

    p = sub.add_parser("run", help="run or resume one federated experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several strategies from identical seeds")
    common(p)
    p.add_argument("--strategies", help=f"comma-separated subset of {','.join(STRATEGIES)}")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("metrics", help="recompute metrics from a run's stored decodes")
    common(p, mode=False)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("partition", help="show per-client shard sizes")
    common(p, mode=False)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("worker", help="run one protocol role (used by multiprocess mode)")
    common(p, mode=False)
    p.add_argument("--role", choices=("server", "client"), required=True)
    p.add_argument("--client-id", type=int)
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("default-config", help="print the default config as JSON")
    p.set_defaults(func=cmd_default_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except FedSimError as exc:
        print(f"fedsim: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
