"""Rule-guided selection of adversarial-yet-valid training crops.

Every candidate box from the pool is scored with three rule terms:
semantic information loss (attention mass cropped away), geometric realism
(fuzzy IoU/visibility windows) and a curriculum stability gate. The selected
crop is the exact argmax of the combined score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, EmptyPool
from .geometry import BoundingBox, CandidatePool, iou, triangular_membership, visibility


@dataclass
class InterventionConfig:
    warmup_epochs: float = 2.0          # ramp length of the stability gate
    min_scale_px: float = 16.0          # boxes at or below this never get intervened
    iou_window: tuple[float, float, float] = (0.3, 0.6, 0.95)
    vis_window: tuple[float, float, float] = (0.4, 0.7, 1.01)
    adv_weight: float = 0.5
    geo_weight: float = 0.5
    fuzzy_and: str = "min"              # "min" (Zadeh) or "product"
    shift_fracs: tuple[float, ...] = (-0.3, -0.15, 0.0, 0.15, 0.3)
    scale_facs: tuple[float, ...] = (0.7, 0.85, 1.0, 1.15, 1.3)

    def __post_init__(self):
        for window in (self.iou_window, self.vis_window):
            lo, peak, hi = window
            if not (lo < peak < hi):
                raise ConfigError(f"bad fuzzy window {window}")
        if self.adv_weight < 0 or self.geo_weight < 0:
            raise ConfigError("combine weights must be >= 0")
        if abs(self.adv_weight + self.geo_weight - 1.0) > 1e-9:
            raise ConfigError("combine weights must sum to 1")
        if self.fuzzy_and not in ("min", "product"):
            raise ConfigError(f"unknown fuzzy_and {self.fuzzy_and}")


@dataclass
class ScoredCandidate:
    box: BoundingBox
    info_loss: float   # semantic information loss, in [0, 1]
    realism: float     # fuzzy geometric validity, in [0, 1]
    stability: float   # curriculum gate, in [0, 1]
    score: float       # combined objective the argmax runs over


def token_importance(attention) -> np.ndarray:
    """Per-token attention received: column mean of a row-stochastic map."""
    a = attention.detach().cpu().numpy() if isinstance(attention, torch.Tensor) else np.asarray(attention)
    return a.mean(axis=0)


def token_centers(grid_shape: tuple[int, int], gt: BoundingBox) -> np.ndarray:
    """(L, 2) centers of the token grid cells in image coordinates, row-major."""
    rows, cols = grid_shape
    cy = gt.y + (np.arange(rows) + 0.5) * (gt.h / rows)
    cx = gt.x + (np.arange(cols) + 0.5) * (gt.w / cols)
    xx, yy = np.meshgrid(cx, cy)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _mass_given(importance: np.ndarray, centers: np.ndarray, region: BoundingBox) -> float:
    inside = (
        (centers[:, 0] >= region.x)
        & (centers[:, 0] < region.x2)
        & (centers[:, 1] >= region.y)
        & (centers[:, 1] < region.y2)
    )
    total = importance.sum()
    if total <= 0:
        return 0.0
    return float(importance[inside].sum() / total)


def attention_mass(attention, grid_shape: tuple[int, int], region: BoundingBox, gt: BoundingBox) -> float:
    """Fraction of attention importance whose token centers fall inside region.

    Token cells tile the ground-truth box (that is where the map was computed);
    the mass is normalized so that region = gt gives exactly 1.
    """
    return _mass_given(token_importance(attention), token_centers(grid_shape, gt), region)


def semantic_info_loss(attention, grid_shape: tuple[int, int], gt: BoundingBox, candidate: BoundingBox) -> float:
    """1 - attention mass retained by the candidate; high when the crop drops
    high-importance tokens."""
    return 1.0 - attention_mass(attention, grid_shape, candidate, gt)


def geometric_realism(candidate: BoundingBox, gt: BoundingBox, cfg: InterventionConfig) -> float:
    """Fuzzy-AND of the IoU and visibility window memberships."""
    m_iou = triangular_membership(iou(candidate, gt), *cfg.iou_window)
    m_vis = triangular_membership(visibility(candidate, gt), *cfg.vis_window)
    if cfg.fuzzy_and == "min":
        return min(m_iou, m_vis)
    return m_iou * m_vis


def curriculum_stability(t: float, gt: BoundingBox, cfg: InterventionConfig) -> float:
    """min(1, t / warmup) gated to zero for objects at or below the scale threshold."""
    if t < 0:
        raise ConfigError(f"epoch t must be >= 0, got {t}")
    gate = 1.0 if min(gt.w, gt.h) > cfg.min_scale_px else 0.0
    return min(1.0, t / cfg.warmup_epochs) * gate


def score_candidate(
    candidate: BoundingBox,
    attention,
    grid_shape: tuple[int, int],
    gt: BoundingBox,
    t: float,
    cfg: InterventionConfig,
) -> ScoredCandidate:
    s_adv = semantic_info_loss(attention, grid_shape, gt, candidate)
    s_geo = geometric_realism(candidate, gt, cfg)
    s_stab = curriculum_stability(t, gt, cfg)
    score = s_stab * (cfg.adv_weight * s_adv + cfg.geo_weight * s_geo)
    return ScoredCandidate(box=candidate, info_loss=s_adv, realism=s_geo, stability=s_stab, score=score)


def select_intervention(
    pool: CandidatePool,
    attention,
    grid_shape: tuple[int, int],
    t: float,
    cfg: InterventionConfig,
) -> ScoredCandidate:
    """Exact argmax of the combined score over the pool.

    Ties break toward the earliest candidate in pool order. While the
    stability gate is closed (warm-up, or the object is too small) the
    ground-truth box itself is returned as a no-op intervention.
    """
    if len(pool) == 0:
        raise EmptyPool("candidate pool is empty")
    s_stab = curriculum_stability(t, pool.gt, cfg)
    if s_stab == 0.0:
        return score_candidate(pool.gt, attention, grid_shape, pool.gt, t, cfg)
    # importance and token centers depend only on (attention, gt); hoist them
    # out of the loop (same per-candidate arithmetic as score_candidate)
    importance = token_importance(attention)
    centers = token_centers(grid_shape, pool.gt)
    best: ScoredCandidate | None = None
    for candidate in pool.candidates:
        s_adv = 1.0 - _mass_given(importance, centers, candidate)
        s_geo = geometric_realism(candidate, pool.gt, cfg)
        score = s_stab * (cfg.adv_weight * s_adv + cfg.geo_weight * s_geo)
        if best is None or score > best.score:
            best = ScoredCandidate(candidate, s_adv, s_geo, s_stab, score)
    return best
