#!/usr/bin/env python3
"""Calibration: FULL vs baseline on the default dataset, clean + perturbed."""
import json
import sys
import time

from tbpslab.harness import DEFAULT_PERTURBED_SUITE, evaluate_model, variant_config
from tbpslab.synthetic import build_dataset
from tbpslab.training import RunConfig, train


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 42
    variants = sys.argv[3].split(",") if len(sys.argv) > 3 else ["FULL", "baseline"]
    base = RunConfig(steps=steps)
    splits = build_dataset(base.dataset)
    out = {}
    for variant in variants:
        cfg = variant_config(base, variant, seed)
        t0 = time.time()
        result = train(cfg, splits)
        t_train = time.time() - t0
        report = evaluate_model(result.model, splits, [DEFAULT_PERTURBED_SUITE])
        row = {
            "train_s": round(t_train, 1),
            "final": {k: round(result.loss_rows[-1][k], 4) for k in ("L_sdm", "L_oim", "L_reg", "L_cf", "total")},
        }
        for name, m in report["suites"].items():
            key = "clean" if name == "clean" else "pert"
            row[key] = {"mAP": round(m["mAP"], 4), "top1": round(m["top1"], 4),
                        "top5": round(m["top5"], 4)}
        out[variant] = row
        print(variant, json.dumps(row), flush=True)
    print(json.dumps(out))


if __name__ == "__main__":
    main()
