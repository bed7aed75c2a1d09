"""Base matching objectives: similarity-distribution matching and the online
instance-matching identity loss with lookup table and circular queue."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, NonFiniteLoss, NoPositive, UnknownPid
from .prototypes import AlignmentWeights, uniform_weights


@dataclass
class OimState:
    """Lookup table of per-identity features plus a FIFO queue of negatives."""

    lut: torch.Tensor                       # (K, C); rows renormalized on every update
    queue: deque = field(default_factory=deque)  # up to Q unit feature rows
    queue_size: int = 64
    sigma: float = 1.0 / 30.0               # softmax temperature
    momentum: float = 0.5

    @classmethod
    def create(cls, num_identities: int, embed_dim: int, queue_size: int = 64,
               sigma: float = 1.0 / 30.0, momentum: float = 0.5) -> "OimState":
        return cls(
            lut=torch.zeros(num_identities, embed_dim, dtype=torch.float64),
            queue=deque(maxlen=queue_size),
            queue_size=queue_size,
            sigma=sigma,
            momentum=momentum,
        )

    @property
    def num_identities(self) -> int:
        return self.lut.shape[0]

    def queue_matrix(self) -> torch.Tensor:
        if not self.queue:
            return torch.zeros(0, self.lut.shape[1], dtype=self.lut.dtype)
        return torch.stack(list(self.queue))

    def push_negative(self, feature: torch.Tensor) -> None:
        if self.queue.maxlen != self.queue_size:
            self.queue = deque(self.queue, maxlen=self.queue_size)
        self.queue.append(feature.detach().clone())

    def update_identity(self, pid: int, feature: torch.Tensor) -> None:
        # replaces (not mutates) the LUT tensor: the pre-update copy may still
        # be referenced by an autograd graph built from this step's logits
        if not (0 <= pid < self.num_identities):
            raise UnknownPid(f"pid {pid} outside LUT of size {self.num_identities}")
        with torch.no_grad():
            mixed = self.momentum * self.lut[pid] + (1.0 - self.momentum) * feature.detach()
            lut = self.lut.clone()
            lut[pid] = F.normalize(mixed, dim=0, eps=1e-12)
            self.lut = lut


def oim_classification_loss(emb: torch.Tensor, pid: int, state: OimState) -> torch.Tensor:
    """Cross-entropy of the embedding against LUT rows + queued negatives."""
    if not (0 <= pid < state.num_identities):
        raise UnknownPid(f"pid {pid} outside LUT of size {state.num_identities}")
    logits = torch.cat([state.lut @ emb, state.queue_matrix() @ emb]) / state.sigma
    return F.cross_entropy(logits.unsqueeze(0), torch.tensor([pid]))


def oim_loss(
    emb: torch.Tensor,
    pid: int,
    state: OimState,
    negatives: list[torch.Tensor] | None = None,
    update: bool = True,
) -> tuple[torch.Tensor, OimState]:
    """Identity loss for one embedding; momentum-updates the LUT row and FIFO-
    pushes any negatives. Scoring always uses the pre-update state."""
    loss = oim_classification_loss(emb, pid, state)
    if update:
        state.update_identity(pid, emb)
        for neg in negatives or []:
            state.push_negative(neg)
    return loss, state


def oim_batch_loss(
    embs: torch.Tensor,
    pids: list[int],
    state: OimState,
    negatives: list[torch.Tensor] | None = None,
    update: bool = True,
) -> torch.Tensor:
    """Mean identity loss over a batch against one LUT snapshot, then update."""
    losses = [oim_classification_loss(embs[i], int(pids[i]), state) for i in range(len(pids))]
    if update:
        for i, pid in enumerate(pids):
            state.update_identity(int(pid), embs[i])
        for neg in negatives or []:
            state.push_negative(neg)
    return torch.stack(losses).mean()


def sdm_loss(
    img_embs: torch.Tensor,
    txt_embs: torch.Tensor,
    pids: list[int],
    w_img: AlignmentWeights | None = None,
    w_txt: AlignmentWeights | None = None,
    temperature: float = 0.1,
) -> torch.Tensor:
    """Bidirectional similarity-distribution matching.

    Each anchor's softmax similarity distribution over the other modality is
    pulled (KL) toward a uniform distribution over its same-identity matches;
    per-anchor terms are weighted by that side's alignment weights (uniform
    when none are given) and the two directions are summed.
    """
    n = img_embs.shape[0]
    if txt_embs.shape[0] != n or len(pids) != n:
        raise NoPositive("embedding/pid lengths disagree")
    if w_img is None:
        w_img = uniform_weights(n, side="image", dtype=img_embs.dtype)
    if w_txt is None:
        w_txt = uniform_weights(n, side="text", dtype=txt_embs.dtype)

    pid_tensor = torch.tensor([int(p) for p in pids])
    match = pid_tensor[:, None] == pid_tensor[None, :]
    if not bool(match.any(dim=1).all()):
        raise NoPositive("an anchor has no same-identity match")

    def directed_kl(sims: torch.Tensor, positives: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        q = positives.to(sims.dtype)
        q = q / q.sum(dim=1, keepdim=True)
        log_p = F.log_softmax(sims, dim=1)
        per_anchor = torch.where(q > 0, q * (torch.log(q.clamp_min(1e-300)) - log_p), q).sum(dim=1)
        return (per_anchor * w).sum()

    sims = img_embs @ txt_embs.T / temperature
    i2t = directed_kl(sims, match, w_img.weights)
    t2i = directed_kl(sims.T, match.T, w_txt.weights)
    return i2t + t2i


def total_loss(components: dict[str, torch.Tensor | float], lambdas: dict[str, float]) -> torch.Tensor:
    """Weighted sum of named loss components; every component needs a weight."""
    total = torch.zeros((), dtype=torch.float64)
    for name in sorted(components):
        if name not in lambdas:
            raise ConfigError(f"no weight configured for loss component {name!r}")
        value = components[name]
        value = value if isinstance(value, torch.Tensor) else torch.tensor(float(value), dtype=torch.float64)
        if not bool(torch.isfinite(value)):
            raise NonFiniteLoss(f"component {name!r} is not finite")
        total = total + lambdas[name] * value
    return total
