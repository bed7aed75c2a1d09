#!/usr/bin/env python3
"""Per-perturbation diagnostics across flag combinations."""
import json
import sys
import time

from tbpslab.evaluation import PerturbationSpec
from tbpslab.harness import evaluate_model
from tbpslab.synthetic import DatasetConfig, build_dataset
from tbpslab.training import ALL_FLAGS, RunConfig, train
from dataclasses import replace

SUITES = {
    "jitter": [PerturbationSpec("box_jitter", 0.2, seed=7)],
    "occl": [PerturbationSpec("occlusion", 0.3, seed=7)],
    "bgswap": [PerturbationSpec("background_swap", 1.0, seed=7)],
    "combo": [
        PerturbationSpec("background_swap", 1.0, seed=7),
        PerturbationSpec("occlusion", 0.3, seed=7),
        PerturbationSpec("box_jitter", 0.2, seed=7),
    ],
}


def flags_for(spec: str) -> dict:
    if spec == "none":
        return {f: False for f in ALL_FLAGS}
    if spec == "full":
        return {f: True for f in ALL_FLAGS}
    on = set(spec)
    return {f: f in on for f in ALL_FLAGS}


def main():
    steps = int(sys.argv[1])
    seed = int(sys.argv[2])
    variant_specs = sys.argv[3].split(",")
    margin = int(sys.argv[4]) if len(sys.argv) > 4 else 2
    extra = json.loads(sys.argv[5]) if len(sys.argv) > 5 else {}

    ds = DatasetConfig(box_margin=margin)
    base = RunConfig(dataset=ds, steps=steps, seed=seed, **extra)
    splits = build_dataset(base.dataset)
    for spec in variant_specs:
        cfg = replace(base, flags=flags_for(spec))
        t0 = time.time()
        result = train(cfg, splits)
        report = evaluate_model(result.model, splits, list(SUITES.values()))
        names = ["clean"] + list(SUITES.keys())
        row = {}
        for name, (sname, m) in zip(names, report["suites"].items()):
            row[name] = round(m["mAP"], 4)
        row["t"] = round(time.time() - t0)
        row["loss"] = {k: round(result.loss_rows[-1][k], 3)
                       for k in ("L_sdm", "L_oim", "L_reg", "L_cf")}
        print(spec, json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
