"""Mini-batch identity prototypes and reliability-based alignment weights.

Per identity, the renormalized mean embedding acts as a prototype; samples are
scored by their cosine deviation from it, deviations are min-max normalized
within the batch, and the resulting confidences feed a power-law weight that
recovers uniform weighting at exponent zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import DegeneratePrototype, LengthMismatch, MissingPrototype


@dataclass
class PrototypeTable:
    prototypes: dict[int, torch.Tensor] = field(default_factory=dict)  # pid -> unit vector
    members: dict[int, list[int]] = field(default_factory=dict)        # pid -> sample indices


@dataclass
class AlignmentWeights:
    weights: torch.Tensor  # (N,), nonnegative, sums to 1
    side: str = "image"    # "image" or "text"


def compute_prototypes(features: torch.Tensor, pids: list[int]) -> PrototypeTable:
    """Per-identity mean of unit features, renormalized back to the sphere."""
    if features.shape[0] != len(pids):
        raise LengthMismatch(f"{features.shape[0]} features vs {len(pids)} pids")
    table = PrototypeTable()
    for idx, pid in enumerate(pids):
        table.members.setdefault(int(pid), []).append(idx)
    for pid, idxs in table.members.items():
        mean = features[idxs].mean(dim=0)
        norm = mean.norm()
        if float(norm) < 1e-8:
            raise DegeneratePrototype(f"identity {pid} mean has norm {float(norm):.2e}")
        table.prototypes[pid] = mean / norm
    return table


def confidence_scores(features: torch.Tensor, pids: list[int], protos: PrototypeTable) -> torch.Tensor:
    """Confidence u in [0, 1]: 1 minus the batch-min-max-normalized cosine
    deviation from the sample's own prototype. A constant-deviation batch maps
    to u = 1 everywhere (no sample is an outlier)."""
    if features.shape[0] != len(pids):
        raise LengthMismatch(f"{features.shape[0]} features vs {len(pids)} pids")
    devs = []
    for idx, pid in enumerate(pids):
        if int(pid) not in protos.prototypes:
            raise MissingPrototype(f"no prototype for identity {pid}")
        devs.append(1.0 - features[idx] @ protos.prototypes[int(pid)])
    d = torch.stack(devs)
    spread = d.max() - d.min()
    if float(spread) == 0.0:
        return torch.ones_like(d)
    return 1.0 - (d - d.min()) / spread


def alignment_weights(u: torch.Tensor, epsilon: float = 0.05, gamma_u: float = 0.5,
                      side: str = "image") -> AlignmentWeights:
    """w_i proportional to (u_i + epsilon)^gamma_u, normalized to sum 1.

    gamma_u = 0 yields exactly uniform weights.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not (0.0 <= gamma_u <= 1.0):
        raise ValueError(f"gamma_u must lie in [0, 1], got {gamma_u}")
    raw = (u + epsilon) ** gamma_u
    return AlignmentWeights(weights=raw / raw.sum(), side=side)


def uniform_weights(n: int, side: str = "image", dtype=torch.float64) -> AlignmentWeights:
    return AlignmentWeights(weights=torch.full((n,), 1.0 / n, dtype=dtype), side=side)


def weighted_loss_aggregate(per_sample_losses: torch.Tensor, w: AlignmentWeights) -> torch.Tensor:
    """Weighted sum of per-sample losses."""
    if per_sample_losses.shape[0] != w.weights.shape[0]:
        raise LengthMismatch(
            f"{per_sample_losses.shape[0]} losses vs {w.weights.shape[0]} weights"
        )
    return (per_sample_losses * w.weights).sum()
