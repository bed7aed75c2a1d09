"""Adversarial saliency occlusion and text-conditioned reconstruction.

The most confident tokens (feature norm x attention received) are replaced by
a learned mask vector; a cross-modal decoder must regress the original token
features back from the corrupted view plus the text sequence.
"""
from __future__ import annotations

import numpy as np
import torch

from .errors import DomainError, ShapeMismatch
from .model import DualEncoder, TokenFeatureMap
from .spatial import token_importance
from .utils import round_half_up


def token_saliency(fmap: TokenFeatureMap) -> np.ndarray:
    """Per-token saliency: L2 feature norm times attention column mean."""
    norms = fmap.tokens.detach().cpu().numpy()
    norms = np.linalg.norm(norms, axis=1)
    return norms * token_importance(fmap.attention)


def adversarial_mask(
    fmap: TokenFeatureMap, saliency: np.ndarray, mask_ratio: float, mask_token: torch.Tensor
) -> tuple[TokenFeatureMap, np.ndarray]:
    """Replace the round(ratio * L) most salient tokens with the mask vector.

    Ties break toward the lower token index; the attention map is passed
    through untouched (the decoder does not consume it). Returns the corrupted
    map and the sorted masked index set.
    """
    if not (0.0 < mask_ratio < 1.0):
        raise DomainError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    num_tokens = fmap.tokens.shape[0]
    if saliency.shape[0] != num_tokens:
        raise ShapeMismatch("saliency length does not match token count")
    k = round_half_up(mask_ratio * num_tokens)
    order = np.argsort(-np.asarray(saliency, dtype=np.float64), kind="stable")
    masked_idx = np.sort(order[:k])
    keep = torch.ones(num_tokens, dtype=torch.bool)
    keep[torch.from_numpy(masked_idx)] = False
    corrupted = torch.where(keep[:, None], fmap.tokens, mask_token[None, :].to(fmap.tokens.dtype))
    return (
        TokenFeatureMap(tokens=corrupted, attention=fmap.attention, grid_shape=fmap.grid_shape),
        masked_idx,
    )


def reconstruction_loss(
    model: DualEncoder,
    corrupted: torch.Tensor,
    txt_tokens: torch.Tensor,
    original: torch.Tensor,
    masked_idx,
    txt_pad: torch.Tensor | None = None,
    masked_only: bool = True,
) -> torch.Tensor:
    """Reconstruction objective for one sample.

    corrupted/original are (L, D); the decoder output is compared to the
    original features. By default the squared error is averaged over masked
    positions only (per-token squared L2 over D), so an output equal to
    original + eps at every masked position scores exactly D * eps^2.
    masked_only=False restores full-map scoring.
    """
    if corrupted.shape != original.shape:
        raise ShapeMismatch(f"{tuple(corrupted.shape)} vs {tuple(original.shape)}")
    pad = txt_pad.unsqueeze(0) if txt_pad is not None else None
    recon = model.decode(corrupted.unsqueeze(0), txt_tokens.unsqueeze(0), pad)[0]
    sq = (recon - original) ** 2
    if masked_only:
        idx = torch.as_tensor(np.asarray(masked_idx), dtype=torch.long)
        if idx.numel() == 0:
            raise DomainError("masked_only scoring needs a non-empty masked set")
        return sq[idx].sum(dim=1).mean()
    return sq.sum(dim=1).mean()
