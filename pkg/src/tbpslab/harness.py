"""Run-level orchestration on top of train(): checkpoint evaluation across
perturbation suites, the ablation matrix, and the gallery-size sweep."""
from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

from .errors import CheckpointMismatch, ConfigError
from .evaluation import PerturbationSpec, evaluate_retrieval, gallery_size_sweep
from .model import DualEncoder, Tokenizer, load_checkpoint
from .synthetic import DatasetSplits, load_dataset
from .training import ALL_FLAGS, RunConfig, TrainResult, train

# ablation variants in paper-table order
ABLATION_VARIANTS = ("FULL", "w/o A", "w/o B", "w/o C", "w/o D")

DEFAULT_PERTURBED_SUITE = [
    PerturbationSpec("background_swap", 1.0, seed=7),
    PerturbationSpec("occlusion", 0.3, seed=7),
    PerturbationSpec("box_jitter", 0.2, seed=7),
]


def parse_suite(text: str, seed: int = 7) -> list[PerturbationSpec]:
    """Parse 'kind:severity[,kind:severity...]' into an ordered suite."""
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, sev = part.partition(":")
        if not sev:
            raise ConfigError(f"suite entry {part!r} must look like kind:severity")
        specs.append(PerturbationSpec(kind.strip(), float(sev), seed=seed))
    if not specs:
        raise ConfigError(f"empty suite spec {text!r}")
    return specs


def suite_name(suite: list[PerturbationSpec]) -> str:
    return "+".join(f"{s.kind}:{s.severity:g}" for s in suite)


def load_model_for_dataset(checkpoint_path, splits: DatasetSplits) -> tuple[DualEncoder, dict]:
    """Load a checkpoint and refuse to pair it with a different dataset config."""
    model, manifest = load_checkpoint(checkpoint_path)
    from .model import config_hash

    expected = config_hash(RunConfig(dataset=splits.config).to_dict()["dataset"])
    if manifest.get("dataset_hash") != expected:
        raise CheckpointMismatch(
            f"checkpoint built for dataset {manifest.get('dataset_hash')}, "
            f"got dataset {expected}"
        )
    return model, manifest


def evaluate_model(
    model: DualEncoder,
    splits: DatasetSplits,
    suites: list[list[PerturbationSpec]] | None = None,
    config_tag: str = "",
) -> dict:
    """Clean evaluation plus one entry per perturbation suite."""
    tokenizer = Tokenizer(splits.vocab)
    report = {"config_hash": config_tag, "suites": {}}
    clean = evaluate_retrieval(model, tokenizer, splits.gallery, splits.queries)
    report["suites"]["clean"] = clean
    for suite in suites or []:
        report["suites"][suite_name(suite)] = evaluate_retrieval(
            model, tokenizer, splits.gallery, splits.queries, suite=suite
        )
    return report


def evaluate_checkpoint(
    checkpoint_path,
    splits: DatasetSplits,
    suites: list[list[PerturbationSpec]] | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    model, manifest = load_model_for_dataset(checkpoint_path, splits)
    report = evaluate_model(model, splits, suites, config_tag=manifest.get("config_hash", ""))
    if out_dir is not None:
        write_metrics_report(Path(out_dir), report)
    return report


def write_metrics_report(out_dir: Path, report: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "config_hash": report.get("config_hash", ""),
        "suites": {
            name: {k: v for k, v in m.items() if k != "per_query"}
            for name, m in report["suites"].items()
        },
    }
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    for name, metrics in report["suites"].items():
        tag = name.replace(":", "_").replace("+", "_").replace("/", "_")
        with open(out_dir / f"per_query_{tag}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["query_id", "AP", "first_hit_rank"])
            writer.writeheader()
            writer.writerows(metrics["per_query"])


def variant_config(base: RunConfig, variant: str, seed: int) -> RunConfig:
    flags = {f: True for f in ALL_FLAGS}
    if variant.startswith("w/o "):
        flags[variant.removeprefix("w/o ")] = False
    elif variant == "baseline":
        flags = {f: False for f in ALL_FLAGS}
    elif variant != "FULL":
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return replace(base, flags=flags, seed=seed)


def run_variant(
    base: RunConfig,
    variant: str,
    seed: int,
    splits: DatasetSplits,
    out_dir: Path | None,
    suites: list[list[PerturbationSpec]],
) -> dict:
    cfg = variant_config(base, variant, seed)
    run_dir = None
    if out_dir is not None:
        run_dir = out_dir / f"{variant.replace('/', '').replace(' ', '_')}_seed{seed}"
    result: TrainResult = train(cfg, splits, run_dir)
    report = evaluate_model(result.model, splits, suites, config_tag=result.config_hash)
    row = {"variant": variant, "seed": seed, "config_hash": result.config_hash}
    for name, metrics in report["suites"].items():
        key = "clean" if name == "clean" else "perturbed"
        row[f"{key}_mAP"] = metrics["mAP"]
        row[f"{key}_top1"] = metrics["top1"]
    return row


def ablate(
    base: RunConfig,
    splits: DatasetSplits,
    out_dir: str | Path | None = None,
    seeds: tuple[int, ...] = (42, 43, 44),
    suites: list[list[PerturbationSpec]] | None = None,
) -> list[dict]:
    """FULL plus the four single-module removals, per seed."""
    suites = suites if suites is not None else [DEFAULT_PERTURBED_SUITE]
    out_path = Path(out_dir) if out_dir is not None else None
    rows = []
    for seed in seeds:
        for variant in ABLATION_VARIANTS:
            rows.append(run_variant(base, variant, seed, splits, out_path, suites))
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        with open(out_path / "ablation.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows


def sweep_gallery(
    checkpoint_path,
    splits: DatasetSplits,
    sizes: list[int],
    out_dir: str | Path | None = None,
    subset_seed: int = 0,
) -> list[dict]:
    model, _ = load_model_for_dataset(checkpoint_path, splits)
    tokenizer = Tokenizer(splits.vocab)
    rows = gallery_size_sweep(model, tokenizer, splits.gallery, splits.queries, sizes, subset_seed)
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        with open(out_path / "gallery_sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows


def load_splits(data_dir: str | Path) -> DatasetSplits:
    return load_dataset(data_dir)
