"""Report emission: similarity-gap histograms, loss curves, sweep curves,
ablation tables and a 2-component linear projection of the joint space."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .evaluation import embed_gallery
from .model import DualEncoder, Tokenizer, batch_texts
from .synthetic import DatasetSplits

log = logging.getLogger("tbpslab.report")


def similarity_gap_stats(model: DualEncoder, splits: DatasetSplits) -> dict:
    """Cosine similarities of gallery boxes to their identity's text prototype.

    Positives: boxes of the prototype's identity. Hardest negatives: for each
    prototype, the best-scoring box of any other identity. The median gap is
    median(positives) - median(hardest negatives).
    """
    tokenizer = Tokenizer(splits.vocab)
    gallery, _ = embed_gallery(model, splits.gallery)
    box_pids = []
    for scene in splits.gallery:
        for person in scene.persons:
            box_pids.append(person.attrs.identity_id)
    embs = torch.stack([emb for _, _, emb in gallery])
    box_pids = np.array(box_pids)

    token_ids, pad = batch_texts([q.text for q in splits.queries], tokenizer)
    with torch.no_grad():
        _, txt_embs = model.encode_text_batch(token_ids, pad)
    protos: dict[int, torch.Tensor] = {}
    for qi, query in enumerate(splits.queries):
        protos.setdefault(query.identity_id, []).append(txt_embs[qi])
    positives, hardest = [], []
    for pid, vecs in sorted(protos.items()):
        proto = torch.stack(vecs).mean(dim=0)
        proto = proto / proto.norm()
        sims = (embs @ proto).numpy()
        own = box_pids == pid
        positives.extend(sims[own].tolist())
        if (~own).any():
            hardest.append(float(sims[~own].max()))
    return {
        "positives": positives,
        "hardest_negatives": hardest,
        "median_gap": float(np.median(positives) - np.median(hardest)),
    }


def plot_similarity_gap(before: dict, after: dict, path: Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for ax, stats, title in ((axes[0], before, "before training"), (axes[1], after, "after training")):
        ax.hist(stats["positives"], bins=30, alpha=0.6, label="positives", color="tab:blue")
        ax.hist(stats["hardest_negatives"], bins=30, alpha=0.6, label="hardest negatives", color="tab:red")
        ax.set_title(f"{title} (median gap {stats['median_gap']:.3f})")
        ax.set_xlabel("cosine similarity to text prototype")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curves(loss_rows: list[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    steps = [int(r["step"]) for r in loss_rows]
    for key in ("L_sdm", "L_oim", "L_reg", "L_cf", "total"):
        ax.plot(steps, [float(r[key]) for r in loss_rows], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_gallery_sweep(rows: list[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    sizes = [r["size"] for r in rows]
    ax.plot(sizes, [r["mAP"] for r in rows], marker="o", label="mAP")
    ax.plot(sizes, [r["top1"] for r in rows], marker="s", label="top-1")
    ax.set_xlabel("gallery size (scenes)")
    ax.set_ylabel("metric")
    ax.set_xscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_table_text(rows: list[dict]) -> str:
    """Mean over seeds per variant, formatted like the usual ablation tables."""
    by_variant: dict[str, list[dict]] = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(row)
    lines = [f"{'variant':<10} {'clean mAP':>10} {'clean top1':>11} {'pert mAP':>10} {'pert top1':>10}"]
    for variant, group in by_variant.items():
        def mean(key):
            return float(np.mean([g[key] for g in group]))
        lines.append(
            f"{variant:<10} {mean('clean_mAP'):>10.4f} {mean('clean_top1'):>11.4f} "
            f"{mean('perturbed_mAP'):>10.4f} {mean('perturbed_top1'):>10.4f}"
        )
    return "\n".join(lines)


def pca_scatter(model: DualEncoder, splits: DatasetSplits, path: Path, max_ids: int = 8) -> None:
    """2-component linear projection of box embeddings, colored by identity."""
    gallery, _ = embed_gallery(model, splits.gallery)
    embs = torch.stack([e for _, _, e in gallery]).numpy()
    pids = np.array([p.attrs.identity_id for s in splits.gallery for p in s.persons])
    centered = embs - embs.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    fig, ax = plt.subplots(figsize=(5.5, 5))
    shown = sorted(set(pids))[:max_ids]
    cmap = plt.get_cmap("tab10")
    for i, pid in enumerate(shown):
        sel = pids == pid
        ax.scatter(proj[sel, 0], proj[sel, 1], s=14, color=cmap(i % 10), label=f"id {pid}")
    ax.set_title("box embeddings, 2-component linear projection")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_report(run_dir: str | Path, splits: DatasetSplits | None, out_dir: str | Path) -> dict:
    """Render every plot/table the artifacts in run_dir support; log and skip
    whatever is missing."""
    run_dir = Path(run_dir)
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    produced: dict = {"plots": [], "skipped": []}

    losses_csv = run_dir / "losses.csv"
    if losses_csv.exists():
        plot_loss_curves(_read_csv(losses_csv), out_path / "loss_curves.png")
        produced["plots"].append("loss_curves.png")
    else:
        log.info("no losses.csv in %s; loss-curve plot skipped", run_dir)
        produced["skipped"].append("loss_curves")

    sweep_csv = run_dir / "gallery_sweep.csv"
    if sweep_csv.exists():
        rows = [
            {"size": int(r["size"]), "mAP": float(r["mAP"]), "top1": float(r["top1"])}
            for r in _read_csv(sweep_csv)
        ]
        plot_gallery_sweep(rows, out_path / "gallery_sweep.png")
        produced["plots"].append("gallery_sweep.png")
    else:
        log.info("no gallery_sweep.csv in %s; sweep plot skipped", run_dir)
        produced["skipped"].append("gallery_sweep")

    ablation_csv = run_dir / "ablation.csv"
    if ablation_csv.exists():
        rows = []
        for r in _read_csv(ablation_csv):
            rows.append({
                "variant": r["variant"],
                "clean_mAP": float(r["clean_mAP"]), "clean_top1": float(r["clean_top1"]),
                "perturbed_mAP": float(r["perturbed_mAP"]), "perturbed_top1": float(r["perturbed_top1"]),
            })
        table = ablation_table_text(rows)
        (out_path / "ablation_table.txt").write_text(table + "\n")
        produced["plots"].append("ablation_table.txt")
    else:
        log.info("no ablation.csv in %s; ablation table skipped", run_dir)
        produced["skipped"].append("ablation_table")

    if splits is not None:
        from .model import load_checkpoint

        ckpt_after = run_dir / "checkpoint.pt"
        ckpt_before = run_dir / "checkpoint_init.pt"
        if ckpt_after.exists() and ckpt_before.exists():
            model_after, _ = load_checkpoint(ckpt_after)
            model_before, _ = load_checkpoint(ckpt_before)
            before = similarity_gap_stats(model_before, splits)
            after = similarity_gap_stats(model_after, splits)
            plot_similarity_gap(before, after, out_path / "similarity_gap.png")
            pca_scatter(model_after, splits, out_path / "embedding_projection.png")
            produced["plots"] += ["similarity_gap.png", "embedding_projection.png"]
            produced["median_gap_before"] = before["median_gap"]
            produced["median_gap_after"] = after["median_gap"]
        else:
            log.info("checkpoints missing in %s; similarity-gap plot skipped", run_dir)
            produced["skipped"].append("similarity_gap")

    with open(out_path / "report.json", "w") as fh:
        json.dump(produced, fh, indent=2, sort_keys=True)
    return produced
