"""Command-line entry point: ``metabalance <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from . import harness
from .config import ExperimentConfig, load_config
from .errors import MetaBalanceError
from .evaluation import evaluate, write_metrics_csv
from .model import load_checkpoint

log = logging.getLogger("metabalance")


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def cmd_preprocess(args) -> int:
    table = data_mod.load_interactions(args.input, args.format)
    table = data_mod.filter_by_count(table, args.min_user, args.min_item, fixpoint=not args.single_pass)
    aux = args.tasks.split(",")[1:] if args.tasks else None
    bundle = data_mod.split(table, tuple(args.ratios), seed=args.seed, aux=aux)
    data_mod.save_split(bundle, args.output)
    print(json.dumps({"train": len(bundle.train), "valid": len(bundle.valid), "test": len(bundle.test),
                      "users": bundle.n_users, "items": bundle.n_items}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.output:
        cfg = cfg.replace(output_dir=args.output)
    rec = harness.train(cfg, seed=args.seed)
    print(json.dumps({"run_id": rec.run_id, "seed": rec.seed, "best_epoch": rec.best_epoch,
                      "best_valid": rec.best_valid, "test": rec.test}))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    res = harness.sweep(cfg)
    text = json.dumps(res.to_dict(), indent=2)
    if args.output:
        Path(args.output).mkdir(parents=True, exist_ok=True)
        (Path(args.output) / f"{cfg.run_id}.sweep.json").write_text(text)
    print(text)
    return 0


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.from_dict(meta["config"])
    bundle = harness.build_dataset(cfg).bundle
    exclude = bundle.train_positives(0) if cfg.training.candidates == "mask-train-positives" else None
    res = evaluate(model, bundle.truth(args.split), bundle.n_items, ks=cfg.training.eval_ks, exclude=exclude)
    write_metrics_csv(sys.stdout, meta.get("run_id", cfg.run_id), 0, res, header=True)
    return 0


def cmd_trace(args) -> int:
    cfg = _config(args).replace(trace=True)
    rec = harness.train(cfg, seed=args.seed)
    text = harness.trace_magnitudes(rec)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    print(json.dumps(harness.benchmark_overhead(cfg, n_tasks=args.tasks, iterations=args.iterations), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metabalance", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set method.params.relax_factor=0.5")

    sp = sub.add_parser("preprocess", help="filter, split and write a raw interaction log")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--format", required=True, help="format descriptor name (ijcai2015, userbehavior2017) or YAML path")
    sp.add_argument("--min-user", type=int, default=5)
    sp.add_argument("--min-item", type=int, default=5)
    sp.add_argument("--single-pass", action="store_true", help="one filtering pass instead of iterating to a fixpoint")
    sp.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    sp.add_argument("--tasks", help="comma separated, target first")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train one run")
    with_config(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="strategy x relax-factor grid over the configured seeds")
    with_config(sp)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("valid", "test"), default="test")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("trace", help="train with magnitude tracing and emit the trace CSV")
    with_config(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("bench", help="per-phase timing on a random workload")
    with_config(sp)
    sp.add_argument("--tasks", type=int, default=4)
    sp.add_argument("--iterations", type=int, default=30)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MetaBalanceError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
