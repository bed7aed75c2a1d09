"""Fully synthetic text-based person search benchmark.

Scenes are procedural-texture backgrounds with sprite persons composed from
attribute-controlled colored regions (head / torso / legs, optional hat or
bag). Text queries are templated closed-vocabulary descriptions of the same
attributes, so vision-language grounding is exact and every retrieval claim
is checkable from the annotations alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, PlacementFailure
from .geometry import BoundingBox, iou

COLOR_NAMES = ("red", "green", "blue", "yellow", "orange", "purple", "cyan", "white")
COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.12, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "orange": (0.95, 0.55, 0.05),
    "purple": (0.55, 0.15, 0.70),
    "cyan": (0.10, 0.80, 0.80),
    "white": (0.95, 0.95, 0.95),
}
SKIN_RGB = (0.87, 0.68, 0.55)
HAT_RGB = (0.15, 0.15, 0.20)
BAG_RGB = (0.45, 0.30, 0.15)

ACCESSORIES = ("none", "hat", "bag")
BACKGROUND_FAMILIES = ("checker", "stripes", "noise", "gradient")

BASE_PERSON_HEIGHT = 30  # px at height_scale=1, keeps persons in the 20-40 px band

TEXT_TEMPLATES = (
    "a person wearing a {torso} shirt and {leg} trousers{acc}",
    "a person in a {torso} top and {leg} pants{acc}",
    "someone dressed in a {torso} shirt and {leg} trousers{acc}",
    "a pedestrian wearing a {torso} top with {leg} trousers{acc}",
)
ACCESSORY_CLAUSES = {"none": "", "hat": " wearing a hat", "bag": " carrying a bag"}


@dataclass(frozen=True)
class PersonAttributes:
    identity_id: int
    torso_color: str
    leg_color: str
    accessory: str
    height_scale: float

    def __post_init__(self):
        if self.identity_id < 0:
            raise ConfigError("identity_id must be >= 0")
        if self.torso_color not in COLOR_RGB or self.leg_color not in COLOR_RGB:
            raise ConfigError(f"unknown color in {self.torso_color}/{self.leg_color}")
        if self.accessory not in ACCESSORIES:
            raise ConfigError(f"unknown accessory {self.accessory}")
        if not (0.7 <= self.height_scale <= 1.3):
            raise ConfigError(f"height_scale {self.height_scale} outside [0.7, 1.3]")


@dataclass
class Sprite:
    """Rendered person: rgb grid plus a boolean silhouette mask."""

    rgb: np.ndarray   # (h, w, 3) float in [0, 1]
    mask: np.ndarray  # (h, w) bool
    torso_rows: tuple[int, int]
    leg_rows: tuple[int, int]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class PersonInstance:
    attrs: PersonAttributes
    box: BoundingBox
    sprite_seed: int
    sprite_xy: tuple[int, int]  # top-left of the sprite grid inside the scene


@dataclass
class SceneRecord:
    scene_id: int
    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    background_id: int
    persons: list[PersonInstance]


@dataclass(frozen=True)
class TextQuery:
    query_id: int
    identity_id: int
    text: str

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


def _noisy_fill(rgb: np.ndarray, rows: slice, cols: slice, color, rng, mask=None):
    block = np.asarray(color, dtype=np.float64) + rng.uniform(
        -0.04, 0.04, size=(rows.stop - rows.start, cols.stop - cols.start, 3)
    )
    rgb[rows, cols] = np.clip(block, 0.0, 1.0)
    if mask is not None:
        mask[rows, cols] = True


def render_person(attrs: PersonAttributes, rng_seed: int) -> Sprite:
    """Deterministically render the sprite for (attrs, seed).

    The grid height is round(BASE_PERSON_HEIGHT * height_scale); regions are
    fixed fractions of it (hat carved out of the top when present), so sprite
    heights stay proportional to height_scale within rounding.
    """
    rng = np.random.default_rng(rng_seed)
    h = int(round(BASE_PERSON_HEIGHT * attrs.height_scale))
    w_body = max(6, int(round(0.42 * h)))
    bag_w = max(3, int(round(0.35 * w_body))) if attrs.accessory == "bag" else 0
    w = w_body + bag_w

    rgb = np.zeros((h, w, 3), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)

    hat_end = int(round(0.12 * h)) if attrs.accessory == "hat" else 0
    head_end = int(round(0.30 * h))
    torso_end = int(round(0.65 * h))

    if attrs.accessory == "hat":
        _noisy_fill(rgb, slice(0, hat_end), slice(int(0.15 * w_body), int(np.ceil(0.85 * w_body))), HAT_RGB, rng, mask)
    _noisy_fill(rgb, slice(hat_end, head_end), slice(int(0.20 * w_body), int(np.ceil(0.80 * w_body))), SKIN_RGB, rng, mask)
    _noisy_fill(rgb, slice(head_end, torso_end), slice(0, w_body), COLOR_RGB[attrs.torso_color], rng, mask)
    # two legs with a gap between them
    _noisy_fill(rgb, slice(torso_end, h), slice(int(0.08 * w_body), int(0.46 * w_body)), COLOR_RGB[attrs.leg_color], rng, mask)
    _noisy_fill(rgb, slice(torso_end, h), slice(int(np.ceil(0.54 * w_body)), int(np.ceil(0.92 * w_body))), COLOR_RGB[attrs.leg_color], rng, mask)
    if attrs.accessory == "bag":
        _noisy_fill(rgb, slice(int(round(0.40 * h)), int(round(0.72 * h))), slice(w_body, w), BAG_RGB, rng, mask)

    return Sprite(rgb=rgb, mask=mask, torso_rows=(head_end, torso_end), leg_rows=(torso_end, h))


def render_background(background_id: int, canvas: tuple[int, int]) -> np.ndarray:
    """Procedural background texture; family = background_id % 4, variant = background_id // 4."""
    w_img, h_img = canvas
    family = BACKGROUND_FAMILIES[background_id % len(BACKGROUND_FAMILIES)]
    rng = np.random.default_rng(1_000_003 * (background_id + 1))
    base = rng.uniform(0.15, 0.75, size=3)
    alt = np.clip(base + rng.uniform(-0.3, 0.3, size=3), 0.0, 1.0)
    yy, xx = np.mgrid[0:h_img, 0:w_img]
    if family == "checker":
        cell = int(rng.integers(6, 14))
        pattern = ((yy // cell + xx // cell) % 2).astype(np.float64)
        img = base[None, None, :] * (1 - pattern[..., None]) + alt[None, None, :] * pattern[..., None]
    elif family == "stripes":
        period = int(rng.integers(5, 12))
        pattern = ((xx // period) % 2).astype(np.float64)
        img = base[None, None, :] * (1 - pattern[..., None]) + alt[None, None, :] * pattern[..., None]
    elif family == "noise":
        img = np.clip(base[None, None, :] + rng.normal(0.0, 0.12, size=(h_img, w_img, 3)), 0.0, 1.0)
    else:  # gradient
        t = (xx / max(w_img - 1, 1) + yy / max(h_img - 1, 1)) / 2.0
        img = base[None, None, :] * (1 - t[..., None]) + alt[None, None, :] * t[..., None]
    return np.clip(img, 0.0, 1.0)


def composite_sprite(pixels: np.ndarray, sprite: Sprite, x: int, y: int) -> None:
    """Paste sprite onto pixels at (x, y) using its silhouette mask. In place."""
    h, w = sprite.mask.shape
    region = pixels[y:y + h, x:x + w]
    region[sprite.mask] = sprite.rgb[sprite.mask]


def generate_scene(
    identities: list[PersonAttributes],
    background_id: int,
    rng_seed: int,
    canvas: tuple[int, int] = (128, 96),
    box_margin: int = 2,
    iou_cap: float = 0.7,
    max_attempts: int = 100,
    scene_id: int = 0,
) -> SceneRecord:
    """Place every identity on a fresh background via rejection sampling.

    Annotation boxes are the sprite rectangle expanded by box_margin px of
    context (clipped to the canvas); the pairwise IoU cap applies to those
    annotation boxes.
    """
    if not identities:
        raise ConfigError("generate_scene needs at least one identity")
    w_img, h_img = canvas
    rng = np.random.default_rng(rng_seed)
    pixels = render_background(background_id, canvas)
    persons: list[PersonInstance] = []
    boxes: list[BoundingBox] = []
    for idx, attrs in enumerate(identities):
        sprite_seed = int(rng.integers(0, 2**31 - 1))
        sprite = render_person(attrs, sprite_seed)
        if sprite.width >= w_img or sprite.height >= h_img:
            raise PlacementFailure(f"sprite larger than canvas {canvas}")
        placed = False
        for _ in range(max_attempts):
            x = int(rng.integers(0, w_img - sprite.width + 1))
            y = int(rng.integers(0, h_img - sprite.height + 1))
            bx = max(0, x - box_margin)
            by = max(0, y - box_margin)
            bw = min(w_img, x + sprite.width + box_margin) - bx
            bh = min(h_img, y + sprite.height + box_margin) - by
            box = BoundingBox(float(bx), float(by), float(bw), float(bh))
            if all(iou(box, other) <= iou_cap for other in boxes):
                composite_sprite(pixels, sprite, x, y)
                persons.append(PersonInstance(attrs=attrs, box=box, sprite_seed=sprite_seed, sprite_xy=(x, y)))
                boxes.append(box)
                placed = True
                break
        if not placed:
            raise PlacementFailure(
                f"could not place person {idx} within {max_attempts} attempts (scene {scene_id})"
            )
    return SceneRecord(scene_id=scene_id, pixels=pixels, background_id=background_id, persons=persons)


def describe_person(attrs: PersonAttributes, rng_seed: int) -> str:
    """Templated description; the template varies with the seed, the attribute
    tokens (colors, accessory noun) do not."""
    rng = np.random.default_rng(rng_seed)
    template = TEXT_TEMPLATES[int(rng.integers(0, len(TEXT_TEMPLATES)))]
    return template.format(
        torso=attrs.torso_color, leg=attrs.leg_color, acc=ACCESSORY_CLAUSES[attrs.accessory]
    )


def build_vocabulary() -> list[str]:
    """Closed vocabulary: every word any template/attribute combination can emit."""
    words: set[str] = set()
    for template in TEXT_TEMPLATES:
        for acc_clause in ACCESSORY_CLAUSES.values():
            text = template.format(torso="red", leg="red", acc=acc_clause)
            words.update(text.split())
    words.update(COLOR_NAMES)
    return ["<pad>"] + sorted(words)


# --------------------------------------------------------------------------
# dataset building
# --------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    seed: int = 42
    canvas: tuple[int, int] = (128, 96)
    train_identities: int = 16
    gallery_identities: int = 12
    train_scenes: int = 140
    gallery_scenes: int = 200
    num_queries: int = 40
    persons_per_scene: tuple[int, int] = (1, 3)
    correlated_backgrounds: bool = True
    disjoint_backgrounds: bool = False  # train and gallery draw from disjoint variant pools
    box_margin: int = 2
    iou_cap: float = 0.7

    def validate(self) -> None:
        cap = len(COLOR_NAMES) ** 2 * len(ACCESSORIES)
        if self.train_identities + self.gallery_identities > cap:
            raise ConfigError(f"identity count exceeds unique attribute capacity {cap}")
        if self.train_scenes < self.train_identities:
            raise ConfigError("train_scenes must be >= train_identities for coverage")
        if self.gallery_scenes < self.gallery_identities:
            raise ConfigError("gallery_scenes must be >= gallery_identities for coverage")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        lo, hi = self.persons_per_scene
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad persons_per_scene {self.persons_per_scene}")


@dataclass
class DatasetSplits:
    config: DatasetConfig
    train: list[SceneRecord]
    gallery: list[SceneRecord]
    queries: list[TextQuery]
    identities: dict[int, PersonAttributes]
    home_background: dict[int, int]
    vocab: list[str] = field(default_factory=build_vocabulary)


def _sample_identities(config: DatasetConfig, rng: np.random.Generator) -> dict[int, PersonAttributes]:
    """Unique (torso, leg, accessory) triples; height_scale drawn on a 0.05 grid."""
    total = config.train_identities + config.gallery_identities
    used: set[tuple[str, str, str]] = set()
    out: dict[int, PersonAttributes] = {}
    for identity_id in range(total):
        while True:
            triple = (
                COLOR_NAMES[int(rng.integers(0, len(COLOR_NAMES)))],
                COLOR_NAMES[int(rng.integers(0, len(COLOR_NAMES)))],
                ACCESSORIES[int(rng.integers(0, len(ACCESSORIES)))],
            )
            if triple not in used:
                used.add(triple)
                break
        height = 0.7 + 0.05 * int(rng.integers(0, 13))  # [0.7, 1.3]
        out[identity_id] = PersonAttributes(identity_id, triple[0], triple[1], triple[2], height)
    return out


def _build_split(
    config: DatasetConfig,
    split_tag: int,
    scene_count: int,
    pool: list[int],
    identities: dict[int, PersonAttributes],
    home_background: dict[int, int],
    rng: np.random.Generator,
) -> list[SceneRecord]:
    lo, hi = config.persons_per_scene
    scenes = []
    for i in range(scene_count):
        # round-robin anchor guarantees every pool identity appears at least once
        anchor = pool[i % len(pool)]
        others = [pid for pid in pool if pid != anchor]
        k = int(rng.integers(lo, hi + 1))
        extra_count = min(k - 1, len(others))
        extra = list(rng.choice(others, size=extra_count, replace=False)) if extra_count else []
        members = [anchor] + [int(p) for p in extra]
        if config.correlated_backgrounds:
            background_id = home_background[anchor]
        else:
            background_id = int(rng.integers(0, 4 * 64))
        seed = int(np.random.SeedSequence([config.seed, split_tag, i]).generate_state(1)[0])
        scenes.append(
            generate_scene(
                [identities[m] for m in members],
                background_id=background_id,
                rng_seed=seed,
                canvas=config.canvas,
                box_margin=config.box_margin,
                iou_cap=config.iou_cap,
                scene_id=i,
            )
        )
    return scenes


def build_dataset(config: DatasetConfig, out_dir: str | Path | None = None) -> DatasetSplits:
    """Generate train/gallery/query splits; optionally serialize to out_dir.

    Train and gallery identity pools are disjoint. Every gallery identity is
    anchored into at least one gallery scene, and queries are drawn round-robin
    over gallery identities, so every query has a non-empty positive set.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    identities = _sample_identities(config, rng)
    train_ids = list(range(config.train_identities))
    gallery_ids = list(range(config.train_identities, config.train_identities + config.gallery_identities))

    # home background per identity: family rng-chosen, variant pools optionally
    # disjoint between train (even variants) and gallery (odd variants)
    home_background: dict[int, int] = {}
    for pid in train_ids + gallery_ids:
        family = int(rng.integers(0, 4))
        variant = int(rng.integers(0, 32))
        if config.disjoint_backgrounds:
            variant = 2 * variant + (0 if pid in set(train_ids) else 1)
        home_background[pid] = family + 4 * variant

    train = _build_split(config, 0, config.train_scenes, train_ids, identities, home_background, rng)
    gallery = _build_split(config, 1, config.gallery_scenes, gallery_ids, identities, home_background, rng)

    queries = []
    for q in range(config.num_queries):
        pid = gallery_ids[q % len(gallery_ids)]
        seed = int(np.random.SeedSequence([config.seed, 2, q]).generate_state(1)[0])
        queries.append(TextQuery(query_id=q, identity_id=pid, text=describe_person(identities[pid], seed)))

    splits = DatasetSplits(
        config=config,
        train=train,
        gallery=gallery,
        queries=queries,
        identities=identities,
        home_background=home_background,
    )
    if out_dir is not None:
        save_dataset(splits, Path(out_dir))
    return splits


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _scene_to_record(scene: SceneRecord) -> dict:
    return {
        "scene_id": scene.scene_id,
        "background_id": scene.background_id,
        "persons": [
            {
                "identity_id": p.attrs.identity_id,
                "box": list(p.box.as_tuple()),
                "attrs": asdict(p.attrs),
                "sprite_seed": p.sprite_seed,
                "sprite_xy": list(p.sprite_xy),
            }
            for p in scene.persons
        ],
    }


def _scene_from_record(rec: dict, pixels: np.ndarray) -> SceneRecord:
    persons = [
        PersonInstance(
            attrs=PersonAttributes(**p["attrs"]),
            box=BoundingBox(*p["box"]),
            sprite_seed=p["sprite_seed"],
            sprite_xy=tuple(p["sprite_xy"]),
        )
        for p in rec["persons"]
    ]
    return SceneRecord(
        scene_id=rec["scene_id"], pixels=pixels, background_id=rec["background_id"], persons=persons
    )


def save_scene_png(scene: SceneRecord, path: Path) -> None:
    arr = np.clip(np.round(scene.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_scene_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_dataset(splits: DatasetSplits, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    for name, scenes in (("train", splits.train), ("gallery", splits.gallery)):
        scene_dir = out_dir / name / "scenes"
        scene_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / name / "annotations.jsonl", "w") as fh:
            for scene in scenes:
                save_scene_png(scene, scene_dir / f"scene_{scene.scene_id:05d}.png")
                fh.write(json.dumps(_scene_to_record(scene), sort_keys=True) + "\n")
    with open(out_dir / "queries.jsonl", "w") as fh:
        for q in splits.queries:
            fh.write(json.dumps({"query_id": q.query_id, "identity_id": q.identity_id, "text": q.text}) + "\n")
    meta = {
        "config": asdict(splits.config),
        "identities": {str(k): asdict(v) for k, v in sorted(splits.identities.items())},
        "home_background": {str(k): v for k, v in sorted(splits.home_background.items())},
        "vocab": splits.vocab,
    }
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_dataset(out_dir: str | Path) -> DatasetSplits:
    out_dir = Path(out_dir)
    with open(out_dir / "dataset.json") as fh:
        meta = json.load(fh)
    cfg_dict = dict(meta["config"])
    cfg_dict["canvas"] = tuple(cfg_dict["canvas"])
    cfg_dict["persons_per_scene"] = tuple(cfg_dict["persons_per_scene"])
    config = DatasetConfig(**cfg_dict)
    identities = {int(k): PersonAttributes(**v) for k, v in meta["identities"].items()}
    home_background = {int(k): v for k, v in meta["home_background"].items()}

    def load_split(name: str) -> list[SceneRecord]:
        scenes = []
        with open(out_dir / name / "annotations.jsonl") as fh:
            for line in fh:
                rec = json.loads(line)
                pixels = load_scene_png(out_dir / name / "scenes" / f"scene_{rec['scene_id']:05d}.png")
                scenes.append(_scene_from_record(rec, pixels))
        return scenes

    queries = []
    with open(out_dir / "queries.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            queries.append(TextQuery(rec["query_id"], rec["identity_id"], rec["text"]))

    return DatasetSplits(
        config=config,
        train=load_split("train"),
        gallery=load_split("gallery"),
        queries=queries,
        identities=identities,
        home_background=home_background,
        vocab=list(meta["vocab"]),
    )
