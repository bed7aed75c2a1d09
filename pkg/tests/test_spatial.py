import numpy as np
import pytest
import torch

from tbpslab.errors import ConfigError, EmptyPool
from tbpslab.geometry import BoundingBox, CandidatePool, generate_candidate_pool
from tbpslab.spatial import (
    InterventionConfig,
    attention_mass,
    curriculum_stability,
    geometric_realism,
    select_intervention,
    semantic_info_loss,
    score_candidate,
)

GRID = (8, 4)
L = 32


def uniform_attention(l=L):
    return np.full((l, l), 1.0 / l)


def brute_force_select(pool, attention, grid_shape, t, cfg):
    """Independent re-evaluation of all three subscores for every candidate."""
    a = np.asarray(attention)
    importance = a.sum(axis=0) / a.shape[0]  # column mean, written differently
    rows, cols = grid_shape
    gt = pool.gt
    centers = []
    for r in range(rows):
        for c in range(cols):
            centers.append((gt.x + (c + 0.5) * gt.w / cols, gt.y + (r + 0.5) * gt.h / rows))

    def tri(x, lo, peak, hi):
        if x <= lo or x >= hi:
            return 0.0
        return (x - lo) / (peak - lo) if x <= peak else (hi - x) / (hi - peak)

    def area(b):
        return b.w * b.h

    def inter(b1, b2):
        iw = min(b1.x + b1.w, b2.x + b2.w) - max(b1.x, b2.x)
        ih = min(b1.y + b1.h, b2.y + b2.h) - max(b1.y, b2.y)
        return max(iw, 0.0) * max(ih, 0.0)

    stab = min(1.0, t / cfg.warmup_epochs) * (1.0 if min(gt.w, gt.h) > cfg.min_scale_px else 0.0)
    if stab == 0.0:
        return gt
    best_idx, best_score = None, -1.0
    for k, cand in enumerate(pool.candidates):
        mass = sum(
            imp for (cx, cy), imp in zip(centers, importance)
            if cand.x <= cx < cand.x + cand.w and cand.y <= cy < cand.y + cand.h
        ) / importance.sum()
        s_adv = 1.0 - mass
        ov = inter(cand, gt)
        iou_v = 1.0 if cand == gt else (ov / (area(cand) + area(gt) - ov) if ov > 0 else 0.0)
        vis_v = ov / area(gt)
        s_geo = min(tri(iou_v, *cfg.iou_window), tri(vis_v, *cfg.vis_window))
        score = stab * (cfg.adv_weight * s_adv + cfg.geo_weight * s_geo)
        if score > best_score:
            best_idx, best_score = k, score
    return pool.candidates[best_idx]


def test_attention_mass_examples():
    gt = BoundingBox(10, 10, 16, 32)
    assert attention_mass(uniform_attention(), GRID, gt, gt) == pytest.approx(1.0, abs=1e-12)
    far = BoundingBox(80, 80, 10, 10)
    assert attention_mass(uniform_attention(), GRID, far, gt) == 0.0
    # left half of the token centers: columns 0..1 of 4
    left = BoundingBox(10, 10, 8, 32)
    mass = attention_mass(uniform_attention(), GRID, left, gt)
    assert abs(mass - 0.5) <= 1.0 / L + 1e-12


def test_semantic_info_loss_examples():
    gt = BoundingBox(0, 0, 16, 32)
    assert semantic_info_loss(uniform_attention(), GRID, gt, gt) == pytest.approx(0.0, abs=1e-12)
    assert semantic_info_loss(uniform_attention(), GRID, gt, BoundingBox(50, 50, 4, 4)) == pytest.approx(1.0)
    # candidate keeping the top half of token centers
    top = BoundingBox(0, 0, 16, 16)
    assert abs(semantic_info_loss(uniform_attention(), GRID, gt, top) - 0.5) <= 1.0 / L + 1e-12


def test_geometric_realism_windows():
    cfg = InterventionConfig()
    gt = BoundingBox(0, 0, 10, 10)
    # candidate = gt: iou = 1 >= hi of (0.3, 0.6, 0.95) -> membership 0
    assert geometric_realism(gt, gt, cfg) == 0.0
    assert geometric_realism(BoundingBox(50, 50, 5, 5), gt, cfg) == 0.0
    # candidate constructed to hit both window peaks exactly:
    # visibility 0.7 and iou 0.6 require area 70/0.6 - 30
    cand = BoundingBox(0, -5.0 / 3.0, 10, 5.0 / 3.0 + 7.0)
    from tbpslab.geometry import iou as iou_fn, visibility

    assert iou_fn(cand, gt) == pytest.approx(0.6, abs=1e-12)
    assert visibility(cand, gt) == pytest.approx(0.7, abs=1e-12)
    assert geometric_realism(cand, gt, cfg) == pytest.approx(1.0, abs=1e-9)


def test_curriculum_stability_formula():
    cfg = InterventionConfig(warmup_epochs=2.0, min_scale_px=16.0)
    big = BoundingBox(0, 0, 20, 40)
    small = BoundingBox(0, 0, 16, 40)  # min(w, h) == threshold -> gated off
    assert curriculum_stability(0.0, big, cfg) == 0.0
    assert curriculum_stability(2.0, big, cfg) == 1.0
    assert curriculum_stability(5.0, big, cfg) == 1.0
    assert curriculum_stability(1.0, big, cfg) == 0.5
    assert curriculum_stability(5.0, small, cfg) == 0.0
    with pytest.raises(ConfigError):
        curriculum_stability(-1.0, big, cfg)


def test_stability_monotone_in_time():
    cfg = InterventionConfig()
    gt = BoundingBox(0, 0, 20, 40)
    values = [curriculum_stability(t, gt, cfg) for t in np.linspace(0, 6, 25)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_select_single_candidate_pool():
    cfg = InterventionConfig()
    gt = BoundingBox(30, 20, 20, 36)
    pool = CandidatePool(gt=gt, candidates=(gt,))
    chosen = select_intervention(pool, uniform_attention(), GRID, t=4.0, cfg=cfg)
    assert chosen.box == gt
    assert chosen.info_loss == pytest.approx(0.0, abs=1e-12)
    expected = chosen.stability * cfg.geo_weight * chosen.realism
    assert chosen.score == pytest.approx(expected, abs=1e-12)


def test_select_warmup_returns_gt():
    cfg = InterventionConfig()
    gt = BoundingBox(30, 20, 20, 36)
    pool = generate_candidate_pool(gt, cfg.shift_fracs, cfg.scale_facs, (128, 96))
    chosen = select_intervention(pool, uniform_attention(), GRID, t=0.0, cfg=cfg)
    assert chosen.box == gt
    assert chosen.stability == 0.0
    with pytest.raises(EmptyPool):
        select_intervention(CandidatePool(gt=gt, candidates=()), uniform_attention(), GRID, 1.0, cfg)


def random_attention(rng, l=L):
    a = rng.uniform(0.01, 1.0, size=(l, l))
    return a / a.sum(axis=1, keepdims=True)


def test_select_matches_brute_force_oracle():
    cfg = InterventionConfig()
    rng = np.random.default_rng(42)
    for trial in range(100):
        gt = BoundingBox(
            float(rng.uniform(0, 90)), float(rng.uniform(0, 50)),
            float(rng.uniform(17, 40)), float(rng.uniform(17, 45)),
        )
        pool = generate_candidate_pool(gt, cfg.shift_fracs, cfg.scale_facs, (128, 96))
        assert len(pool) <= 625
        attn = random_attention(rng)
        t = float(rng.uniform(0.0, 5.0))
        chosen = select_intervention(pool, attn, GRID, t, cfg)
        expected = brute_force_select(pool, attn, GRID, t, cfg)
        assert chosen.box == expected, f"trial {trial}"


def test_info_loss_decreases_as_candidate_grows():
    gt = BoundingBox(10, 10, 16, 32)
    attn = uniform_attention()
    prev = 1.0
    for grow in np.linspace(0.1, 1.0, 10):
        cand = BoundingBox(10, 10, 16 * grow, 32 * grow)
        cur = semantic_info_loss(attn, GRID, gt, cand)
        assert cur <= prev + 1e-12
        prev = cur


def test_scale_consistency():
    cfg = InterventionConfig()
    rng = np.random.default_rng(3)
    attn = random_attention(rng)
    gt = BoundingBox(12, 8, 24, 36)
    cand = BoundingBox(16, 12, 20, 30)
    doubled_gt = BoundingBox(24, 16, 48, 72)
    doubled_cand = BoundingBox(32, 24, 40, 60)
    assert semantic_info_loss(attn, GRID, gt, cand) == pytest.approx(
        semantic_info_loss(attn, GRID, doubled_gt, doubled_cand), abs=1e-12
    )
    assert geometric_realism(cand, gt, cfg) == pytest.approx(
        geometric_realism(doubled_cand, doubled_gt, cfg), abs=1e-12
    )


def test_torch_attention_accepted():
    gt = BoundingBox(10, 10, 16, 32)
    attn = torch.full((L, L), 1.0 / L, dtype=torch.float64)
    assert attention_mass(attn, GRID, gt, gt) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        InterventionConfig(iou_window=(0.6, 0.3, 0.9))
    with pytest.raises(ConfigError):
        InterventionConfig(adv_weight=0.8, geo_weight=0.8)
    with pytest.raises(ConfigError):
        InterventionConfig(fuzzy_and="xor")


def test_score_candidate_consistency_with_select():
    # the hoisted fast path must agree with per-candidate scoring
    cfg = InterventionConfig()
    rng = np.random.default_rng(11)
    gt = BoundingBox(20, 14, 22, 38)
    pool = generate_candidate_pool(gt, cfg.shift_fracs, cfg.scale_facs, (128, 96))
    attn = random_attention(rng)
    chosen = select_intervention(pool, attn, GRID, t=3.0, cfg=cfg)
    rescored = score_candidate(chosen.box, attn, GRID, gt, 3.0, cfg)
    assert rescored.score == chosen.score
    assert rescored.info_loss == chosen.info_loss
    assert rescored.realism == chosen.realism
