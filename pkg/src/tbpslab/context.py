"""Counterfactual context transplantation within a mini-batch.

A binary mask splits each token map into attention-salient foreground and
context tokens; an exact linear-assignment solve pairs each sample with the
donor whose attention structure is closest; context tokens are then swapped
in from the donor and the blend is pushed through the shared projection with
an identity-consistency objective.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import BatchTooSmall, DomainError, ShapeMismatch
from .model import TokenFeatureMap
from .spatial import token_importance
from .utils import round_half_up


@dataclass
class DisentanglementMask:
    mask: np.ndarray          # (L,) uint8, 1 = foreground
    foreground_ratio: float

    @property
    def foreground_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class BatchAssignment:
    permutation: np.ndarray   # (B,) donor index per sample
    cost: float               # sum of squared attention distances


def saliency_mask(fmap: TokenFeatureMap, foreground_ratio: float) -> DisentanglementMask:
    """Mark the round(ratio * L) highest-importance tokens as foreground.

    Importance is the attention column mean (attention received); ties break
    toward the lower token index.
    """
    if not (0.0 < foreground_ratio < 1.0):
        raise DomainError(f"foreground_ratio must be in (0, 1), got {foreground_ratio}")
    importance = token_importance(fmap.attention)
    num_tokens = importance.shape[0]
    k = round_half_up(foreground_ratio * num_tokens)
    order = np.argsort(-importance, kind="stable")
    mask = np.zeros(num_tokens, dtype=np.uint8)
    mask[order[:k]] = 1
    return DisentanglementMask(mask=mask, foreground_ratio=foreground_ratio)


def attention_cost_matrix(attn_maps: list) -> np.ndarray:
    """C[i, j] = squared Frobenius distance between attention maps i and j."""
    mats = []
    for m in attn_maps:
        arr = m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else np.asarray(m)
        mats.append(arr.astype(np.float64))
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ShapeMismatch("attention maps must share one shape")
    stack = np.stack([m.ravel() for m in mats])  # (B, L*L)
    diff = stack[:, None, :] - stack[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _ordered_cost(cost: np.ndarray, perm: np.ndarray) -> float:
    total = 0.0
    for i in range(len(perm)):
        total += float(cost[i, perm[i]])
    return total


def _lap_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def _lexicographically_smallest_optimum(cost: np.ndarray) -> np.ndarray:
    """Among all optimal assignments, return the lexicographically smallest.

    Fix rows in order; for each row take the smallest column whose forced
    choice still admits a completion at the optimal total cost (checked with
    a reduced linear-assignment solve).
    """
    b = cost.shape[0]
    best_total = _lap_cost(cost)
    tol = 1e-9 * max(1.0, abs(best_total))
    chosen = np.full(b, -1, dtype=np.int64)
    free_cols = list(range(b))
    remaining_total = best_total
    for i in range(b):
        rest_rows = list(range(i + 1, b))
        for j in sorted(free_cols):
            if not math.isfinite(cost[i, j]):
                continue
            if rest_rows:
                sub = cost[np.ix_(rest_rows, [c for c in free_cols if c != j])]
                try:
                    completion = _lap_cost(sub)
                except ValueError:  # forbidden edges make the rest infeasible
                    continue
            else:
                completion = 0.0
            if cost[i, j] + completion <= remaining_total + tol:
                chosen[i] = j
                free_cols.remove(j)
                remaining_total -= float(cost[i, j])
                break
        if chosen[i] < 0:
            raise ValueError("assignment infeasible")
    return chosen


def optimal_context_assignment(attn_maps: list, forbid_self: bool = True) -> BatchAssignment:
    """Exact minimizer of the total squared attention distance over donors.

    forbid_self=True (derangement mode) bans self-assignment so every sample
    receives a genuinely foreign context; with forbid_self=False the literal
    objective is solved and the identity permutation wins any tie.
    """
    if len(attn_maps) < 2:
        raise BatchTooSmall(f"assignment needs B >= 2, got {len(attn_maps)}")
    cost = attention_cost_matrix(attn_maps)
    if forbid_self:
        np.fill_diagonal(cost, np.inf)
    perm = _lexicographically_smallest_optimum(cost)
    return BatchAssignment(permutation=perm, cost=_ordered_cost(cost, perm))


def synthesize_counterfactual(
    target: TokenFeatureMap, donor: TokenFeatureMap, mask: DisentanglementMask
) -> TokenFeatureMap:
    """Foreground tokens from the target, context tokens from the donor.

    The blend is token-wise exact (selection, not arithmetic); the result is
    fed forward from this point, so it carries the target's attention map
    rather than a recomputed one.
    """
    if target.tokens.shape != donor.tokens.shape:
        raise ShapeMismatch(
            f"target {tuple(target.tokens.shape)} vs donor {tuple(donor.tokens.shape)}"
        )
    if mask.mask.shape[0] != target.tokens.shape[0]:
        raise ShapeMismatch("mask length does not match token count")
    keep = torch.from_numpy(mask.mask.astype(bool))[:, None]
    blended = torch.where(keep, target.tokens, donor.tokens)
    return TokenFeatureMap(tokens=blended, attention=target.attention, grid_shape=target.grid_shape)


def counterfactual_consistency_loss(
    original_emb: torch.Tensor, cf_emb: torch.Tensor, pid: int, oim_state
) -> torch.Tensor:
    """Identity loss on the counterfactual embedding plus an embedding
    consistency term ||original - counterfactual||^2.

    The lookup table is scored but not updated here; updates belong to the
    main identity loss on the original view.
    """
    from .losses import oim_classification_loss

    ce = oim_classification_loss(cf_emb, pid, oim_state)
    consistency = ((original_emb - cf_emb) ** 2).sum()
    return ce + consistency
