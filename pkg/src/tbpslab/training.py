"""Training orchestration: one loop that wires the four interventions
(A: spatial crop selection, B: counterfactual context, C: saliency-masked
reconstruction, D: reliability-weighted alignment) around the base SDM + OIM
objectives, with flag gates for ablations."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import context as ctx_mod
from . import regularization as reg_mod
from .errors import ConfigError, NonFiniteLoss
from .geometry import BoundingBox, generate_candidate_pool, iou, visibility
from .losses import OimState, oim_batch_loss, sdm_loss, total_loss
from .model import (
    DualEncoder,
    ModelConfig,
    TokenFeatureMap,
    Tokenizer,
    batch_texts,
    config_hash,
    crop_to_patches,
    save_checkpoint,
)
from .prototypes import alignment_weights, compute_prototypes, confidence_scores, uniform_weights
from .spatial import InterventionConfig, select_intervention
from .synthetic import DatasetConfig, DatasetSplits, describe_person

ALL_FLAGS = ("A", "B", "C", "D")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    # model dims (vocab is taken from the dataset at train time)
    grid_rows: int = 8
    grid_cols: int = 4
    patch: int = 4
    dim: int = 64
    embed_dim: int = 64
    heads: int = 4
    img_blocks: int = 2
    txt_blocks: int = 1
    attention_source: str = "last"
    # interventions
    spatial: InterventionConfig = field(default_factory=InterventionConfig)
    stability_time_unit: str = "epochs"  # or "steps"
    foreground_ratio: float = 0.5
    derangement: bool = True
    donor_identity_filter: bool = False
    mask_ratio: float = 0.5
    masked_only: bool = True
    prototype_epsilon: float = 0.05
    prototype_gamma: float = 0.5
    # losses
    sdm_temperature: float = 0.1
    oim_queue: int = 64
    oim_sigma: float = 1.0 / 30.0
    oim_momentum: float = 0.5
    lambdas: dict = field(default_factory=lambda: {"sdm": 1.0, "oim": 1.0, "reg": 0.5, "cf": 0.5})
    # optimization
    batch_size: int = 8
    instances_per_identity: int = 2
    steps: int = 1500
    base_lr: float = 2e-3
    warmup_frac: float = 0.1
    decay_point: float = 0.6
    decay_factor: float = 0.1
    distractors_per_step: int = 2
    checkpoint_every: int = 500
    seed: int = 42
    flags: dict = field(default_factory=lambda: {f: True for f in ALL_FLAGS})
    num_threads: int = 4
    log_assignments: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (assignment needs B >= 2)")
        if self.stability_time_unit not in ("epochs", "steps"):
            raise ConfigError(f"bad stability_time_unit {self.stability_time_unit}")
        for flag in self.flags:
            if flag not in ALL_FLAGS:
                raise ConfigError(f"unknown flag {flag!r}")

    def model_config(self, vocab: list[str]) -> ModelConfig:
        return ModelConfig(
            grid_rows=self.grid_rows, grid_cols=self.grid_cols, patch=self.patch,
            dim=self.dim, embed_dim=self.embed_dim, heads=self.heads,
            img_blocks=self.img_blocks, txt_blocks=self.txt_blocks,
            vocab=vocab, attention_source=self.attention_source,
        )

    def flag(self, name: str) -> bool:
        return bool(self.flags.get(name, False))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["canvas"] = list(d["dataset"]["canvas"])
        d["dataset"]["persons_per_scene"] = list(d["dataset"]["persons_per_scene"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "dataset" in d:
            ds = dict(d["dataset"])
            ds["canvas"] = tuple(ds.get("canvas", (128, 96)))
            ds["persons_per_scene"] = tuple(ds.get("persons_per_scene", (1, 3)))
            d["dataset"] = DatasetConfig(**ds)
        if "spatial" in d:
            sp = dict(d["spatial"])
            for key in ("iou_window", "vis_window", "shift_fracs", "scale_facs"):
                if key in sp:
                    sp[key] = tuple(sp[key])
            d["spatial"] = InterventionConfig(**sp)
        return cls(**d)

    @property
    def run_hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def dataset_hash(self) -> str:
        return config_hash(self.to_dict()["dataset"])


def load_run_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def lr_at(step: int, cfg: RunConfig) -> float:
    """Linear warm-up over the first warmup_frac of steps, one 10x-style decay
    at the decay point."""
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return cfg.base_lr * (step + 1) / warm
    if step >= int(round(cfg.decay_point * cfg.steps)):
        return cfg.base_lr * cfg.decay_factor
    return cfg.base_lr


@dataclass
class TrainResult:
    model: DualEncoder
    oim_state: OimState
    loss_rows: list[dict]
    checkpoint_path: Path | None
    config_hash: str


def _sample_batch(instances_by_pid: dict[int, list], cfg: RunConfig, rng: np.random.Generator):
    """PK-style batch: a few identities, instances_per_identity samples each."""
    pids = sorted(instances_by_pid)
    k = max(1, cfg.batch_size // cfg.instances_per_identity)
    chosen = rng.choice(pids, size=min(k, len(pids)), replace=False)
    batch = []
    for pid in chosen:
        pool = instances_by_pid[pid]
        replace = len(pool) < cfg.instances_per_identity
        idxs = rng.choice(len(pool), size=cfg.instances_per_identity, replace=replace)
        batch.extend(pool[i] for i in idxs)
    batch = batch[: cfg.batch_size]
    while len(batch) < cfg.batch_size:
        pid = pids[int(rng.integers(0, len(pids)))]
        pool = instances_by_pid[pid]
        batch.append(pool[int(rng.integers(0, len(pool)))])
    return batch


def _sample_distractor(scene, rng: np.random.Generator, max_iou: float = 0.3):
    """A random background box overlapping no person above max_iou."""
    h_img, w_img = scene.pixels.shape[:2]
    for _ in range(20):
        w = float(rng.uniform(12, 30))
        h = float(rng.uniform(16, 40))
        if w >= w_img or h >= h_img:
            continue
        x = float(rng.uniform(0, w_img - w))
        y = float(rng.uniform(0, h_img - h))
        box = BoundingBox(x, y, w, h)
        if all(iou(box, p.box) <= max_iou for p in scene.persons):
            return box
    return None


def train(
    config: RunConfig,
    splits: DatasetSplits,
    out_dir: str | Path | None = None,
) -> TrainResult:
    torch.set_num_threads(config.num_threads)
    run_hash = config.run_hash
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    tokenizer = Tokenizer(splits.vocab)
    model = DualEncoder(config.model_config(splits.vocab), init_seed=config.seed)
    model.train()
    oim_state = OimState.create(
        num_identities=config.dataset.train_identities,
        embed_dim=config.embed_dim,
        queue_size=config.oim_queue,
        sigma=config.oim_sigma,
        momentum=config.oim_momentum,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.base_lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1001]))
    grid_shape = (config.grid_rows, config.grid_cols)

    instances_by_pid: dict[int, list] = {}
    for scene in splits.train:
        for person in scene.persons:
            instances_by_pid.setdefault(person.attrs.identity_id, []).append((scene, person))
    steps_per_epoch = max(
        1, round(sum(len(v) for v in instances_by_pid.values()) / config.batch_size)
    )

    # annotation boxes recur every epoch; cache their pools and patch crops
    pool_cache: dict = {}
    crop_cache: dict = {}

    def cached_pool(box: BoundingBox, bounds):
        key = (box.as_tuple(), bounds)
        if key not in pool_cache:
            pool_cache[key] = generate_candidate_pool(
                box, config.spatial.shift_fracs, config.spatial.scale_facs, bounds
            )
        return pool_cache[key]

    def cached_crop(scene, box: BoundingBox):
        key = (scene.scene_id, box.as_tuple())
        if key not in crop_cache:
            crop_cache[key] = crop_to_patches(scene.pixels, box, model.cfg)
        return crop_cache[key]

    loss_rows: list[dict] = []
    intervention_rows: list[dict] = []
    assignment_rows: list[dict] = []
    checkpoint_path = out_path / "checkpoint.pt" if out_path is not None else None
    if out_path is not None:
        # step-0 snapshot: the "before training" reference for reports
        save_checkpoint(
            out_path / "checkpoint_init.pt", model, 0,
            extra={"config_hash": run_hash, "dataset_hash": config.dataset_hash,
                   "run_config": config.to_dict()},
        )

    for step in range(config.steps):
        lr = lr_at(step, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        t_epoch = step / steps_per_epoch if config.stability_time_unit == "epochs" else float(step)

        batch = _sample_batch(instances_by_pid, config, rng)
        pids = [person.attrs.identity_id for _, person in batch]
        texts = [
            describe_person(person.attrs, int(rng.integers(0, 2**31 - 1)))
            for _, person in batch
        ]

        # --- A: rule-guided crop selection (attention probed at the gt box) ---
        train_boxes = []
        if config.flag("A"):
            with torch.no_grad():
                gt_patches = torch.stack([cached_crop(s, p.box) for s, p in batch])
                _, gt_attn, _ = model.encode_image_batch(gt_patches)
            for i, (scene, person) in enumerate(batch):
                h_img, w_img = scene.pixels.shape[:2]
                pool = cached_pool(person.box, (w_img, h_img))
                chosen = select_intervention(pool, gt_attn[i], grid_shape, t_epoch, config.spatial)
                train_boxes.append(chosen.box)
                intervention_rows.append({
                    "step": step, "scene_id": scene.scene_id,
                    "iou": iou(chosen.box, person.box),
                    "visibility": visibility(chosen.box, person.box),
                    "s_adv": chosen.info_loss, "s_geo": chosen.realism,
                    "s_stab": chosen.stability, "j": chosen.score,
                })
        else:
            train_boxes = [person.box for _, person in batch]

        patches = torch.stack([cached_crop(s, b) for (s, _), b in zip(batch, train_boxes)])
        tokens, attn, img_embs = model.encode_image_batch(patches)
        token_ids, pad = batch_texts(texts, tokenizer)
        txt_tokens, txt_embs = model.encode_text_batch(token_ids, pad)

        # --- D: reliability weights (constants w.r.t. the graph) ---
        if config.flag("D"):
            with torch.no_grad():
                w_img = alignment_weights(
                    confidence_scores(img_embs.detach(), pids, compute_prototypes(img_embs.detach(), pids)),
                    config.prototype_epsilon, config.prototype_gamma, side="image",
                )
                w_txt = alignment_weights(
                    confidence_scores(txt_embs.detach(), pids, compute_prototypes(txt_embs.detach(), pids)),
                    config.prototype_epsilon, config.prototype_gamma, side="text",
                )
        else:
            w_img = uniform_weights(len(batch), side="image")
            w_txt = uniform_weights(len(batch), side="text")

        components: dict[str, torch.Tensor] = {}
        components["sdm"] = sdm_loss(
            img_embs, txt_embs, pids, w_img, w_txt, temperature=config.sdm_temperature
        )

        negatives = []
        for _ in range(config.distractors_per_step):
            scene, _ = batch[int(rng.integers(0, len(batch)))]
            box = _sample_distractor(scene, rng)
            if box is None:
                continue
            with torch.no_grad():
                _, _, neg_emb = model.encode_image_batch(
                    crop_to_patches(scene.pixels, box, model.cfg).unsqueeze(0)
                )
            negatives.append(neg_emb[0])
        components["oim"] = oim_batch_loss(img_embs, pids, oim_state, negatives=negatives)

        # --- B: counterfactual context transplantation ---
        if config.flag("B"):
            fg_masks = [
                ctx_mod.saliency_mask(
                    TokenFeatureMap(tokens[i], attn[i], grid_shape),
                    config.foreground_ratio,
                )
                for i in range(len(batch))
            ]
            assignment = ctx_mod.optimal_context_assignment(
                [attn[i] for i in range(len(batch))], forbid_self=config.derangement
            )
            if config.log_assignments:
                assignment_rows.append({
                    "step": step,
                    "permutation": " ".join(str(int(p)) for p in assignment.permutation),
                    "cost": assignment.cost,
                })
            keep = torch.stack([
                torch.from_numpy(m.mask.astype(bool)) for m in fg_masks
            ])[:, :, None]
            donor = tokens[torch.from_numpy(assignment.permutation)]
            blended = torch.where(keep, tokens, donor)
            cf_embs = model.pool_visual(blended)
            include = [
                i for i in range(len(batch))
                if not (config.donor_identity_filter and pids[int(assignment.permutation[i])] == pids[i])
            ]
            if include:
                cf_terms = []
                for i in include:
                    cf_terms.append(
                        ctx_mod.counterfactual_consistency_loss(
                            img_embs[i], cf_embs[i], pids[i], oim_state
                        )
                    )
                components["cf"] = torch.stack(cf_terms).mean()
            else:
                components["cf"] = torch.zeros((), dtype=torch.float64)
        else:
            components["cf"] = torch.zeros((), dtype=torch.float64)

        # --- C: adversarial saliency masking + text-conditioned reconstruction ---
        if config.flag("C"):
            originals = tokens.detach()
            corrupted_list, masked_sets = [], []
            for i in range(len(batch)):
                fmap = TokenFeatureMap(tokens[i], attn[i], grid_shape)
                saliency = reg_mod.token_saliency(fmap)
                corrupted, masked_idx = reg_mod.adversarial_mask(
                    fmap, saliency, config.mask_ratio, model.mask_token
                )
                corrupted_list.append(corrupted.tokens)
                masked_sets.append(masked_idx)
            recon = model.decode(torch.stack(corrupted_list), txt_tokens, pad)
            per_sample = []
            for i in range(len(batch)):
                sq = (recon[i] - originals[i]) ** 2
                if config.masked_only:
                    idx = torch.from_numpy(masked_sets[i])
                    per_sample.append(sq[idx].sum(dim=1).mean())
                else:
                    per_sample.append(sq.sum(dim=1).mean())
            per_sample = torch.stack(per_sample)
            reg_weights = w_img if config.flag("D") else uniform_weights(len(batch), side="image")
            components["reg"] = (per_sample * reg_weights.weights).sum()
        else:
            components["reg"] = torch.zeros((), dtype=torch.float64)

        loss = total_loss(components, config.lambdas)
        if not bool(torch.isfinite(loss)):
            raise NonFiniteLoss(f"total loss non-finite at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        w = w_img.weights
        entropy = float(-(w * torch.log(w.clamp_min(1e-300))).sum())
        loss_rows.append({
            "step": step,
            "L_sdm": components["sdm"].detach().item(),
            "L_oim": components["oim"].detach().item(),
            "L_reg": components["reg"].detach().item(),
            "L_cf": components["cf"].detach().item(),
            "total": loss.detach().item(),
            "lr": lr,
            "w_img_min": float(w.min()),
            "w_img_max": float(w.max()),
            "w_img_entropy": entropy,
        })

        if checkpoint_path is not None and (
            (step + 1) % config.checkpoint_every == 0 or step + 1 == config.steps
        ):
            save_checkpoint(
                checkpoint_path, model, step + 1,
                extra={"config_hash": run_hash, "dataset_hash": config.dataset_hash,
                       "run_config": config.to_dict()},
            )

    if out_path is not None:
        _write_csv(out_path / "losses.csv", loss_rows)
        if intervention_rows:
            _write_csv(out_path / "interventions.csv", intervention_rows)
        if assignment_rows:
            _write_csv(out_path / "assignments.csv", assignment_rows)
        with open(out_path / "run_config.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)

    model.eval()
    return TrainResult(
        model=model, oim_state=oim_state, loss_rows=loss_rows,
        checkpoint_path=checkpoint_path, config_hash=run_hash,
    )


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
