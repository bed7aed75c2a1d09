"""Retrieval protocol: ranked box lists, IoU-gated true positives, mAP/CMC,
perturbation suites and gallery-size sweeps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyGallery, NoPositive, SizeTooLarge
from .geometry import BoundingBox, clip_box, iou
from .model import DualEncoder, Tokenizer, batch_texts, crop_to_patches
from .synthetic import (
    SceneRecord,
    TextQuery,
    composite_sprite,
    render_background,
    render_person,
)

IOU_TRUE_POSITIVE = 0.5
PERTURBATION_KINDS = ("box_jitter", "occlusion", "background_swap")


@dataclass(frozen=True)
class RankedEntry:
    scene_id: int
    box: BoundingBox
    score: float


@dataclass
class RankedRetrievalList:
    query_id: int
    entries: list[RankedEntry]


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not (0.0 <= self.severity <= 1.0):
            raise ValueError(f"severity must be in [0, 1], got {self.severity}")


# --------------------------------------------------------------------------
# ranking and metrics
# --------------------------------------------------------------------------

def rank_gallery(
    query_id: int,
    query_emb: torch.Tensor,
    gallery: list[tuple[int, BoundingBox, torch.Tensor]],
) -> RankedRetrievalList:
    """Sort gallery boxes by cosine similarity, ties by (scene_id, box)."""
    if not gallery:
        raise EmptyGallery("cannot rank an empty gallery")
    entries = [
        RankedEntry(scene_id=sid, box=box, score=float(query_emb @ emb))
        for sid, box, emb in gallery
    ]
    entries.sort(key=lambda e: (-e.score, e.scene_id, e.box.as_tuple()))
    return RankedRetrievalList(query_id=query_id, entries=entries)


def is_true_positive(entry: RankedEntry, gt_boxes_in_scene: list[BoundingBox]) -> bool:
    """True iff some (still unmatched) ground-truth box overlaps at IoU >= 0.5."""
    return any(iou(entry.box, gt) >= IOU_TRUE_POSITIVE for gt in gt_boxes_in_scene)


def _greedy_hits(ranked: RankedRetrievalList, gts: dict[int, list[BoundingBox]]) -> list[bool]:
    """Relevance flags down the ranking; each gt box is consumed at most once
    (the highest-IoU unmatched gt wins)."""
    remaining = {sid: list(boxes) for sid, boxes in gts.items()}
    flags = []
    for entry in ranked.entries:
        pool = remaining.get(entry.scene_id, [])
        best_i, best_v = -1, IOU_TRUE_POSITIVE
        for i, gt in enumerate(pool):
            v = iou(entry.box, gt)
            if v >= best_v:
                best_i, best_v = i, v
        if best_i >= 0:
            pool.pop(best_i)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(ranked: RankedRetrievalList, gts: dict[int, list[BoundingBox]]) -> float:
    """AP down the ranked list with the one-match-per-gt rule, normalized by
    the total number of ground-truth boxes."""
    total_gt = sum(len(v) for v in gts.values())
    if total_gt == 0:
        raise NoPositive(f"query {ranked.query_id} has no ground-truth boxes")
    hits = _greedy_hits(ranked, gts)
    ap, matched = 0.0, 0
    for k, rel in enumerate(hits, start=1):
        if rel:
            matched += 1
            ap += matched / k
    return ap / total_gt


def first_hit_rank(ranked: RankedRetrievalList, gts: dict[int, list[BoundingBox]]) -> int | None:
    hits = _greedy_hits(ranked, gts)
    for k, rel in enumerate(hits, start=1):
        if rel:
            return k
    return None


def cmc_topk(
    ranked_lists: list[RankedRetrievalList],
    gts_per_query: dict[int, dict[int, list[BoundingBox]]],
    ks: tuple[int, ...] = (1, 5, 10),
) -> dict[int, float]:
    """Fraction of queries whose first true positive lands at rank <= k."""
    if not ranked_lists:
        raise NoPositive("empty query set")
    ranks = [first_hit_rank(r, gts_per_query[r.query_id]) for r in ranked_lists]
    return {k: sum(1 for r in ranks if r is not None and r <= k) / len(ranks) for k in ks}


# --------------------------------------------------------------------------
# perturbations
# --------------------------------------------------------------------------

def apply_perturbation(
    scene: SceneRecord, spec: PerturbationSpec
) -> tuple[SceneRecord, list[BoundingBox]]:
    """Perturb one scene; returns (scene, eval boxes aligned with persons).

    box_jitter leaves pixels alone and jitters the boxes handed to the
    encoder; occlusion pastes a noise patch covering `severity` of each person
    box; background_swap re-renders the scene on a different texture family.
    Severity 0 is an exact no-op for every kind.
    """
    boxes = [p.box for p in scene.persons]
    if spec.severity == 0.0:
        return scene, boxes
    kind_tag = PERTURBATION_KINDS.index(spec.kind)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, scene.scene_id, kind_tag]))
    h_img, w_img = scene.pixels.shape[:2]

    if spec.kind == "box_jitter":
        jittered = []
        for box in boxes:
            dx = float(rng.uniform(-0.5, 0.5)) * spec.severity * box.w
            dy = float(rng.uniform(-0.5, 0.5)) * spec.severity * box.h
            sw = 1.0 + float(rng.uniform(-0.5, 0.5)) * spec.severity
            sh = 1.0 + float(rng.uniform(-0.5, 0.5)) * spec.severity
            w, h = box.w * sw, box.h * sh
            cx, cy = box.center
            moved = BoundingBox(cx + dx - 0.5 * w, cy + dy - 0.5 * h, w, h)
            clipped = clip_box(moved, (w_img, h_img))
            jittered.append(clipped if clipped is not None else box)
        return scene, jittered

    if spec.kind == "occlusion":
        pixels = scene.pixels.copy()
        for box in boxes:
            bw, bh = int(round(box.w)), int(round(box.h))
            ow = max(1, int(round(bw * np.sqrt(spec.severity))))
            oh = max(1, min(bh, int(round(spec.severity * bw * bh / ow))))
            ox = int(box.x) + int(rng.integers(0, max(1, bw - ow + 1)))
            oy = int(box.y) + int(rng.integers(0, max(1, bh - oh + 1)))
            ox, oy = min(ox, w_img - ow), min(oy, h_img - oh)
            base = rng.uniform(0.1, 0.9, size=3)
            patch = np.clip(base[None, None, :] + rng.normal(0, 0.1, size=(oh, ow, 3)), 0, 1)
            pixels[oy:oy + oh, ox:ox + ow] = patch
        out = SceneRecord(scene.scene_id, pixels, scene.background_id, scene.persons)
        return out, boxes

    # background_swap: different texture family, persons re-composited
    old_family = scene.background_id % 4
    family = (old_family + 1 + int(rng.integers(0, 3))) % 4
    new_bg = family + 4 * int(rng.integers(0, 64))
    pixels = render_background(new_bg, (w_img, h_img))
    for person in scene.persons:
        sprite = render_person(person.attrs, person.sprite_seed)
        composite_sprite(pixels, sprite, person.sprite_xy[0], person.sprite_xy[1])
    out = SceneRecord(scene.scene_id, pixels, new_bg, scene.persons)
    return out, boxes


def apply_suite(
    scene: SceneRecord, suite: list[PerturbationSpec]
) -> tuple[SceneRecord, list[BoundingBox]]:
    """Apply perturbations in sequence; later box adjustments win."""
    boxes = [p.box for p in scene.persons]
    for spec in suite:
        scene, boxes = apply_perturbation(scene, spec)
    return scene, boxes


# --------------------------------------------------------------------------
# end-to-end evaluation
# --------------------------------------------------------------------------

def embed_gallery(
    model: DualEncoder,
    scenes: list[SceneRecord],
    suite: list[PerturbationSpec] | None = None,
    chunk: int = 128,
) -> tuple[list[tuple[int, BoundingBox, torch.Tensor]], dict[int, list[tuple[int, BoundingBox]]]]:
    """Encode every person box of every (possibly perturbed) gallery scene.

    Returns the gallery index [(scene_id, eval_box, emb)] and the ground-truth
    map identity -> [(scene_id, original gt box)] used for the TP rule.
    """
    crops, meta = [], []
    gt_by_identity: dict[int, list[tuple[int, BoundingBox]]] = {}
    for scene in scenes:
        for person in scene.persons:
            gt_by_identity.setdefault(person.attrs.identity_id, []).append((scene.scene_id, person.box))
        pert_scene, eval_boxes = apply_suite(scene, suite or [])
        for box in eval_boxes:
            crops.append(crop_to_patches(pert_scene.pixels, box, model.cfg))
            meta.append((scene.scene_id, box))
    gallery = []
    with torch.no_grad():
        for start in range(0, len(crops), chunk):
            batch = torch.stack(crops[start:start + chunk])
            _, _, embs = model.encode_image_batch(batch)
            for (sid, box), emb in zip(meta[start:start + chunk], embs):
                gallery.append((sid, box, emb))
    return gallery, gt_by_identity


def evaluate_retrieval(
    model: DualEncoder,
    tokenizer: Tokenizer,
    scenes: list[SceneRecord],
    queries: list[TextQuery],
    suite: list[PerturbationSpec] | None = None,
) -> dict:
    """Full protocol: embed gallery and queries, rank, score mAP and CMC."""
    gallery, gt_by_identity = embed_gallery(model, scenes, suite)
    token_ids, pad = batch_texts([q.text for q in queries], tokenizer)
    with torch.no_grad():
        _, txt_embs = model.encode_text_batch(token_ids, pad)

    per_query, ranked_lists, gts_per_query = [], [], {}
    for qi, query in enumerate(queries):
        gts: dict[int, list[BoundingBox]] = {}
        for sid, box in gt_by_identity.get(query.identity_id, []):
            gts.setdefault(sid, []).append(box)
        ranked = rank_gallery(query.query_id, txt_embs[qi], gallery)
        ranked_lists.append(ranked)
        gts_per_query[query.query_id] = gts
        per_query.append(
            {
                "query_id": query.query_id,
                "AP": average_precision(ranked, gts),
                "first_hit_rank": first_hit_rank(ranked, gts),
            }
        )
    cmc = cmc_topk(ranked_lists, gts_per_query)
    return {
        "mAP": float(np.mean([r["AP"] for r in per_query])),
        "top1": cmc[1],
        "top5": cmc[5],
        "top10": cmc[10],
        "num_queries": len(queries),
        "per_query": per_query,
    }


def gallery_size_sweep(
    model: DualEncoder,
    tokenizer: Tokenizer,
    scenes: list[SceneRecord],
    queries: list[TextQuery],
    sizes: list[int],
    subset_seed: int = 0,
) -> list[dict]:
    """Evaluate on nested gallery subsets of the requested sizes.

    Every subset contains all scenes holding a positive for some query;
    distractor scenes are added in a seeded shuffled order, so subsets are
    nested and metrics cannot improve as the gallery grows.
    """
    by_id = {s.scene_id: s for s in scenes}
    query_ids = {q.identity_id for q in queries}
    required = sorted(
        {s.scene_id for s in scenes if any(p.attrs.identity_id in query_ids for p in s.persons)}
    )
    rest = sorted(set(by_id) - set(required))
    rng = np.random.default_rng(subset_seed)
    rng.shuffle(rest)
    rows = []
    for size in sorted(sizes):
        if size > len(scenes):
            raise SizeTooLarge(f"size {size} > gallery of {len(scenes)} scenes")
        if size < len(required):
            raise SizeTooLarge(
                f"size {size} cannot include the {len(required)} scenes with positives"
            )
        chosen = required + rest[: size - len(required)]
        subset = [by_id[sid] for sid in sorted(chosen)]
        metrics = evaluate_retrieval(model, tokenizer, subset, queries)
        rows.append({"size": size, "mAP": metrics["mAP"], "top1": metrics["top1"],
                     "top5": metrics["top5"], "top10": metrics["top10"]})
    return rows
