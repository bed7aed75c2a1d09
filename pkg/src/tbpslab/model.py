"""Desk-scale dual encoder with a text-conditioned reconstruction decoder.

Visual side: crop -> bilinear resample to a fixed token grid -> patch
projection -> self-attention blocks -> mean-pool -> unit-norm embedding.
Text side: closed-vocabulary token table -> self-attention -> masked mean-pool
-> unit-norm embedding. The decoder cross-attends corrupted visual tokens to
the contextualized text sequence and regresses original token features.

Everything runs in float64 so finite-difference gradient checks are sharp.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointMismatch, DegenerateBox, ShapeMismatch, UnknownToken
from .geometry import BoundingBox
from .synthetic import SceneRecord, build_vocabulary

DTYPE = torch.float64


@dataclass
class ModelConfig:
    grid_rows: int = 8
    grid_cols: int = 4
    patch: int = 4            # each token covers patch x patch resampled pixels
    dim: int = 64             # token width D
    embed_dim: int = 64       # shared space width C
    heads: int = 4
    img_blocks: int = 2
    txt_blocks: int = 1
    max_text_len: int = 32
    vocab: list[str] = field(default_factory=build_vocabulary)
    attention_source: str = "last"  # which block's head-mean map is exported

    @property
    def num_tokens(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class TokenFeatureMap:
    """Per-region token features plus the row-stochastic self-attention map."""

    tokens: torch.Tensor     # (L, D)
    attention: torch.Tensor  # (L, L), rows sum to 1
    grid_shape: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid_shape
        if self.tokens.shape[0] != rows * cols:
            raise ShapeMismatch(f"{self.tokens.shape[0]} tokens vs grid {self.grid_shape}")
        if self.attention.shape != (self.tokens.shape[0],) * 2:
            raise ShapeMismatch(f"attention shape {tuple(self.attention.shape)}")


def bilinear_crop(pixels: np.ndarray, box: BoundingBox, out_h: int, out_w: int) -> torch.Tensor:
    """Resample the box region of an (H, W, 3) image to (out_h, out_w, 3).

    Sampling positions are output-pixel centers mapped into the box; border
    samples clamp to the image. Raises DegenerateBox below 1 px of support.
    """
    if box.w < 1.0 or box.h < 1.0:
        raise DegenerateBox(f"box {box.as_tuple()} below 1 px")
    h_img, w_img = pixels.shape[:2]
    ys = box.y + (np.arange(out_h) + 0.5) * (box.h / out_h) - 0.5
    xs = box.x + (np.arange(out_w) + 0.5) * (box.w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h_img - 1.0)
    xs = np.clip(xs, 0.0, w_img - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h_img - 1)
    x1 = np.minimum(x0 + 1, w_img - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    img = pixels
    out = (
        img[y0][:, x0] * (1 - wy) * (1 - wx)
        + img[y0][:, x1] * (1 - wy) * wx
        + img[y1][:, x0] * wy * (1 - wx)
        + img[y1][:, x1] * wy * wx
    )
    return torch.from_numpy(np.ascontiguousarray(out)).to(DTYPE)


def crop_to_patches(pixels: np.ndarray, box: BoundingBox, cfg: ModelConfig) -> torch.Tensor:
    """Crop + resample a box into the (L, patch*patch*3) token input sequence."""
    rows, cols, p = cfg.grid_rows, cfg.grid_cols, cfg.patch
    grid = bilinear_crop(pixels, box, rows * p, cols * p)            # (rows*p, cols*p, 3)
    grid = grid.reshape(rows, p, cols, p, 3).permute(0, 2, 1, 3, 4)  # (rows, cols, p, p, 3)
    return grid.reshape(rows * cols, p * p * 3)


class Tokenizer:
    """Closed-vocabulary whitespace tokenizer; id 0 is the padding token."""

    def __init__(self, vocab: list[str]):
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if self.index.get("<pad>") != 0:
            raise ShapeMismatch("vocabulary must reserve index 0 for <pad>")

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise UnknownToken(f"token {word!r} not in vocabulary")
            ids.append(self.index[word])
        return ids


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_pad: torch.Tensor | None = None):
        b, l, d = x.shape
        q, k, v = self.qkv(x).reshape(b, l, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if key_pad is not None:
            logits = logits.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, l, d)
        return self.proj(out), attn.mean(dim=1)  # head-mean map (b, l, l)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, ctx_pad: torch.Tensor | None = None):
        b, l, d = x.shape
        lc = ctx.shape[1]
        q = self.q(x).reshape(b, l, self.heads, d // self.heads).transpose(1, 2)
        k, v = self.kv(ctx).reshape(b, lc, 2, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if ctx_pad is not None:
            logits = logits.masked_fill(ctx_pad[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, l, d)
        return self.proj(out)


def _mlp(dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))


class EncoderBlock(nn.Module):
    """Pre-LN transformer block that also reports its head-mean attention map."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _mlp(dim)

    def forward(self, x: torch.Tensor, key_pad: torch.Tensor | None = None):
        h, attn_map = self.attn(self.norm1(x), key_pad)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn_map


class DualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, init_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d, l = cfg.dim, cfg.num_tokens
        self.patch_proj = nn.Linear(cfg.patch * cfg.patch * 3, d)
        self.img_pos = nn.Parameter(torch.zeros(l, d))
        self.img_blocks = nn.ModuleList(EncoderBlock(d, cfg.heads) for _ in range(cfg.img_blocks))
        self.img_head = nn.Linear(d, cfg.embed_dim)

        self.token_embed = nn.Embedding(len(cfg.vocab), d)
        self.txt_pos = nn.Parameter(torch.zeros(cfg.max_text_len, d))
        self.txt_blocks = nn.ModuleList(EncoderBlock(d, cfg.heads) for _ in range(cfg.txt_blocks))
        self.txt_head = nn.Linear(d, cfg.embed_dim)

        self.mask_token = nn.Parameter(torch.zeros(d))
        self.dec_pos = nn.Parameter(torch.zeros(l, d))
        self.dec_norm_q = nn.LayerNorm(d)
        self.dec_norm_ctx = nn.LayerNorm(d)
        self.dec_cross = CrossAttention(d, cfg.heads)
        self.dec_norm2 = nn.LayerNorm(d)
        self.dec_mlp = _mlp(d)
        self.dec_head = nn.Linear(d, d)

        self.to(DTYPE)
        self.reset_parameters(init_seed)

    def reset_parameters(self, seed: int) -> None:
        """Seeded re-init so model weights are a pure function of (config, seed)."""
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name in ("img_pos", "txt_pos", "dec_pos", "mask_token") or "token_embed" in name:
                    p.normal_(0.0, 0.02, generator=gen)
                elif p.dim() >= 2:
                    p.normal_(0.0, p.shape[-1] ** -0.5, generator=gen)
                elif name.endswith("weight"):  # LayerNorm scales
                    p.fill_(1.0)
                else:
                    p.zero_()

    # ----- visual side -----

    def encode_image_batch(self, patches: torch.Tensor):
        """(B, L, patch_dim) -> tokens (B, L, D), attention (B, L, L), embeddings (B, C)."""
        if patches.shape[1] != self.cfg.num_tokens:
            raise ShapeMismatch(f"expected {self.cfg.num_tokens} tokens, got {patches.shape[1]}")
        x = self.patch_proj(patches) + self.img_pos
        maps = []
        for block in self.img_blocks:
            x, attn_map = block(x)
            maps.append(attn_map)
        attention = maps[-1] if self.cfg.attention_source == "last" else torch.stack(maps).mean(0)
        return x, attention, self.pool_visual(x)

    def pool_visual(self, tokens: torch.Tensor) -> torch.Tensor:
        """Mean-pool token features and project to the unit sphere. (B, L, D) -> (B, C)."""
        return F.normalize(self.img_head(tokens.mean(dim=1)), dim=-1, eps=1e-12)

    def encode_image(self, scene: SceneRecord, box: BoundingBox) -> tuple[TokenFeatureMap, torch.Tensor]:
        patches = crop_to_patches(scene.pixels, box, self.cfg).unsqueeze(0)
        tokens, attention, emb = self.encode_image_batch(patches)
        fmap = TokenFeatureMap(
            tokens=tokens[0], attention=attention[0], grid_shape=(self.cfg.grid_rows, self.cfg.grid_cols)
        )
        return fmap, emb[0]

    # ----- text side -----

    def encode_text_batch(self, token_ids: torch.Tensor, pad_mask: torch.Tensor):
        """(B, Lt) int ids with True-at-pad mask -> tokens (B, Lt, D), embeddings (B, C)."""
        if token_ids.shape[1] > self.cfg.max_text_len:
            raise ShapeMismatch(f"text longer than {self.cfg.max_text_len} tokens")
        x = self.token_embed(token_ids) + self.txt_pos[: token_ids.shape[1]]
        for block in self.txt_blocks:
            x, _ = block(x, key_pad=pad_mask)
        keep = (~pad_mask).to(DTYPE)[..., None]
        pooled = (x * keep).sum(dim=1) / keep.sum(dim=1).clamp_min(1.0)
        return x, F.normalize(self.txt_head(pooled), dim=-1, eps=1e-12)

    def encode_text(self, text: str, tokenizer: Tokenizer) -> tuple[torch.Tensor, torch.Tensor]:
        ids = tokenizer.encode(text)
        token_ids = torch.tensor([ids], dtype=torch.long)
        pad = torch.zeros(1, len(ids), dtype=torch.bool)
        tokens, emb = self.encode_text_batch(token_ids, pad)
        return tokens[0], emb[0]

    # ----- decoder -----

    def decode(self, vis_tokens: torch.Tensor, txt_tokens: torch.Tensor,
               txt_pad: torch.Tensor | None = None) -> torch.Tensor:
        """Reconstruct all visual token features from a corrupted view + text.

        vis_tokens (B, L, D), txt_tokens (B, Lt, D) -> (B, L, D).
        """
        if vis_tokens.shape[-1] != self.cfg.dim or txt_tokens.shape[-1] != self.cfg.dim:
            raise ShapeMismatch("token width mismatch")
        if vis_tokens.shape[1] != self.cfg.num_tokens:
            raise ShapeMismatch(f"expected {self.cfg.num_tokens} visual tokens")
        x = vis_tokens + self.dec_pos
        x = x + self.dec_cross(self.dec_norm_q(x), self.dec_norm_ctx(txt_tokens), txt_pad)
        x = x + self.dec_mlp(self.dec_norm2(x))
        return self.dec_head(x)


def similarity(e_t: torch.Tensor, e_v: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of unit-norm embeddings (a plain dot product)."""
    return (e_t * e_v).sum(-1)


def batch_texts(texts: list[str], tokenizer: Tokenizer) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad a list of texts into (B, Lt) ids and the True-at-pad mask."""
    ids = [tokenizer.encode(t) for t in texts]
    lt = max(len(i) for i in ids)
    token_ids = torch.zeros(len(ids), lt, dtype=torch.long)
    pad = torch.ones(len(ids), lt, dtype=torch.bool)
    for r, seq in enumerate(ids):
        token_ids[r, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        pad[r, : len(seq)] = False
    return token_ids, pad


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, model: DualEncoder, step: int, extra: dict | None = None) -> None:
    manifest = {
        "model_config": asdict(model.cfg),
        "step": step,
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    if extra:
        manifest.update(extra)
    torch.save({"state_dict": model.state_dict(), "manifest": manifest}, path)


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[DualEncoder, dict]:
    blob = torch.load(path, weights_only=False)
    manifest = blob["manifest"]
    if expected_hash is not None and manifest.get("config_hash") != expected_hash:
        raise CheckpointMismatch(
            f"checkpoint hash {manifest.get('config_hash')} != expected {expected_hash}"
        )
    cfg = ModelConfig(**manifest["model_config"])
    model = DualEncoder(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, manifest
