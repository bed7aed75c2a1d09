"""Command-line surface: dataset build, train, eval, ablate, sweep-gallery,
report. Fails with exit code 1 and a machine-readable error JSON on stderr."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ablate,
    evaluate_checkpoint,
    load_splits,
    parse_suite,
    sweep_gallery,
)
from .reporting import build_report
from .synthetic import build_dataset
from .training import ALL_FLAGS, RunConfig, load_run_config, train


def _parse_flags(text: str | None) -> dict:
    if text is None:
        return {f: True for f in ALL_FLAGS}
    wanted = {p.strip() for p in text.split(",") if p.strip()}
    return {f: f in wanted for f in ALL_FLAGS}


def _load_config(path: str | None) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbpslab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="dataset operations")
    dsub = p_dataset.add_subparsers(dest="dataset_command", required=True)
    p_build = dsub.add_parser("build", help="generate the synthetic benchmark")
    p_build.add_argument("--config", default=None, help="run config JSON (dataset section used)")
    p_build.add_argument("--seed", type=int, default=None)
    p_build.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--flags", default=None, help="comma list among A,B,C,D; empty = all off")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--suite", action="append", default=[],
                        help="kind:severity[,kind:severity...]; repeatable")

    p_ablate = sub.add_parser("ablate", help="run the FULL / w-o-X matrix")
    p_ablate.add_argument("--config", default=None)
    p_ablate.add_argument("--data", required=True)
    p_ablate.add_argument("--out", required=True)
    p_ablate.add_argument("--seeds", default="42,43,44")

    p_sweep = sub.add_parser("sweep-gallery", help="metrics vs gallery size")
    p_sweep.add_argument("--checkpoint", required=True)
    p_sweep.add_argument("--data", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--sizes", default="25,50,100,200")
    p_sweep.add_argument("--seed", type=int, default=0)

    p_report = sub.add_parser("report", help="render plots/tables from run artifacts")
    p_report.add_argument("--run-dir", required=True)
    p_report.add_argument("--data", default=None)
    p_report.add_argument("--out", required=True)
    return parser


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "dataset":
        cfg = _load_config(args.config)
        ds = cfg.dataset
        if args.seed is not None:
            ds.seed = args.seed
        build_dataset(ds, out_dir=args.out)
        print(json.dumps({"status": "ok", "out": args.out, "dataset_hash": cfg.dataset_hash}))
    elif args.command == "train":
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.flags is not None:
            cfg.flags = _parse_flags(args.flags)
        splits = load_splits(args.data)
        result = train(cfg, splits, out_dir=args.out)
        print(json.dumps({
            "status": "ok", "checkpoint": str(result.checkpoint_path),
            "final_loss": result.loss_rows[-1]["total"] if result.loss_rows else None,
            "config_hash": result.config_hash,
        }))
    elif args.command == "eval":
        splits = load_splits(args.data)
        suites = [parse_suite(s) for s in args.suite]
        report = evaluate_checkpoint(args.checkpoint, splits, suites, out_dir=args.out)
        summary = {name: {"mAP": m["mAP"], "top1": m["top1"]} for name, m in report["suites"].items()}
        print(json.dumps({"status": "ok", "suites": summary}))
    elif args.command == "ablate":
        cfg = _load_config(args.config)
        splits = load_splits(args.data)
        seeds = tuple(int(s) for s in args.seeds.split(","))
        rows = ablate(cfg, splits, out_dir=args.out, seeds=seeds)
        print(json.dumps({"status": "ok", "rows": len(rows)}))
    elif args.command == "sweep-gallery":
        splits = load_splits(args.data)
        sizes = [int(s) for s in args.sizes.split(",")]
        rows = sweep_gallery(args.checkpoint, splits, sizes, out_dir=args.out, subset_seed=args.seed)
        print(json.dumps({"status": "ok", "rows": rows}))
    elif args.command == "report":
        splits = load_splits(args.data) if args.data else None
        produced = build_report(args.run_dir, splits, args.out)
        print(json.dumps({"status": "ok", **{k: v for k, v in produced.items() if k != "plots"},
                          "plots": produced["plots"]}))
    return 0


def main() -> None:
    try:
        sys.exit(run(sys.argv[1:]))
    except SystemExit:
        raise
    except Exception as exc:  # emit machine-readable error and nonzero exit
        print(json.dumps({"status": "error", "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
