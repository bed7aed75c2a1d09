from itertools import permutations

import numpy as np
import pytest
import torch

from tbpslab.context import (
    DisentanglementMask,
    counterfactual_consistency_loss,
    optimal_context_assignment,
    saliency_mask,
    synthesize_counterfactual,
)
from tbpslab.errors import BatchTooSmall, DomainError, ShapeMismatch
from tbpslab.losses import OimState
from tbpslab.model import TokenFeatureMap
from tbpslab.utils import round_half_up

L = 32
GRID = (8, 4)


def fmap_from(attention, tokens=None):
    attention = torch.as_tensor(attention, dtype=torch.float64)
    if tokens is None:
        tokens = torch.zeros(attention.shape[0], 16, dtype=torch.float64)
    rows = attention.shape[0] // 4
    return TokenFeatureMap(tokens=tokens, attention=attention, grid_shape=(rows, 4))


def brute_force_assignment(cost, derangement):
    """First (= lexicographically smallest) strict minimizer over permutations."""
    b = cost.shape[0]
    best_perm, best_cost = None, None
    for perm in permutations(range(b)):
        if derangement and any(perm[i] == i for i in range(b)):
            continue
        total = 0.0
        for i in range(b):
            total += float(cost[i, perm[i]])
        if best_cost is None or total < best_cost:
            best_perm, best_cost = perm, total
    return np.array(best_perm), best_cost


def pairwise_cost(maps):
    flat = np.stack([np.asarray(m).ravel() for m in maps])
    b = flat.shape[0]
    cost = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            cost[i, j] = float(((flat[i] - flat[j]) ** 2).sum())
    return cost


def test_saliency_mask_tie_break_uniform():
    attn = np.full((L, L), 1.0 / L)
    mask = saliency_mask(fmap_from(attn), 0.5)
    assert mask.foreground_count == 16
    assert np.array_equal(np.flatnonzero(mask.mask), np.arange(16))


def test_saliency_mask_excludes_downweighted_token():
    attn = np.full((L, L), 1.0 / L)
    attn[:, 20] -= 0.01  # token 20 receives less attention
    attn[:, 0] += 0.01
    ratio = (L - 1) / L
    mask = saliency_mask(fmap_from(attn), ratio)
    assert mask.foreground_count == L - 1
    assert mask.mask[20] == 0
    assert mask.mask.sum() == round_half_up(ratio * L)


def test_saliency_mask_popcount_property():
    rng = np.random.default_rng(0)
    for _ in range(100):
        attn = rng.uniform(0.01, 1, size=(L, L))
        attn /= attn.sum(axis=1, keepdims=True)
        ratio = float(rng.uniform(0.05, 0.95))
        mask = saliency_mask(fmap_from(attn), ratio)
        assert mask.foreground_count == round_half_up(ratio * L)
    with pytest.raises(DomainError):
        saliency_mask(fmap_from(np.eye(L)), 0.0)


def test_saliency_mask_scale_invariant():
    rng = np.random.default_rng(5)
    attn = rng.uniform(0.01, 1, size=(L, L))
    attn /= attn.sum(axis=1, keepdims=True)
    base = saliency_mask(fmap_from(attn), 0.4)
    scaled = saliency_mask(fmap_from(attn * 7.3), 0.4)
    assert np.array_equal(base.mask, scaled.mask)


def test_assignment_identical_maps_identity():
    maps = [np.full((4, 4), 0.25)] * 3
    out = optimal_context_assignment(maps, forbid_self=False)
    assert np.array_equal(out.permutation, np.arange(3))
    assert out.cost == 0.0


def test_assignment_b2_self_wins_without_derangement():
    a1 = np.full((4, 4), 0.25)
    a2 = np.eye(4)
    out = optimal_context_assignment([a1, a2], forbid_self=False)
    assert np.array_equal(out.permutation, np.arange(2))
    assert out.cost == 0.0


def test_assignment_b2_derangement_swaps():
    a1 = np.full((4, 4), 0.25)
    a2 = np.eye(4)
    out = optimal_context_assignment([a1, a2], forbid_self=True)
    assert np.array_equal(out.permutation, np.array([1, 0]))
    with pytest.raises(BatchTooSmall):
        optimal_context_assignment([a1], forbid_self=True)


@pytest.mark.parametrize("derangement", [False, True])
def test_assignment_matches_brute_force(derangement):
    rng = np.random.default_rng(123 + int(derangement))
    for _ in range(30):
        b = int(rng.integers(2, 8))
        maps = [rng.uniform(size=(5, 5)) for _ in range(b)]
        out = optimal_context_assignment(maps, forbid_self=derangement)
        cost = pairwise_cost(maps)
        if derangement:
            np.fill_diagonal(cost, np.inf)
        expected_perm, expected_cost = brute_force_assignment(cost, derangement)
        assert np.array_equal(out.permutation, expected_perm)
        assert out.cost == expected_cost


def test_assignment_invariants():
    rng = np.random.default_rng(7)
    for _ in range(20):
        b = int(rng.integers(2, 9))
        maps = [rng.uniform(size=(6, 6)) for _ in range(b)]
        out = optimal_context_assignment(maps, forbid_self=True)
        assert sorted(out.permutation.tolist()) == list(range(b))
        cost = pairwise_cost(maps)
        identity_cost = float(np.trace(cost))
        assert out.cost <= identity_cost + 1e-12 or identity_cost == 0.0
        for _ in range(100):
            perm = rng.permutation(b)
            if all(perm[i] != i for i in range(b)):
                rand_cost = sum(float(cost[i, perm[i]]) for i in range(b))
                assert out.cost <= rand_cost + 1e-9


def test_counterfactual_blend_exactness():
    rng = np.random.default_rng(1)
    t_target = torch.from_numpy(rng.normal(size=(L, 16)))
    t_donor = torch.from_numpy(rng.normal(size=(L, 16)))
    attn = torch.full((L, L), 1.0 / L, dtype=torch.float64)
    target = TokenFeatureMap(t_target, attn, GRID)
    donor = TokenFeatureMap(t_donor, attn, GRID)

    ones = DisentanglementMask(np.ones(L, dtype=np.uint8), 0.99)
    assert torch.equal(synthesize_counterfactual(target, donor, ones).tokens, t_target)
    zeros = DisentanglementMask(np.zeros(L, dtype=np.uint8), 0.01)
    assert torch.equal(synthesize_counterfactual(target, donor, zeros).tokens, t_donor)

    for _ in range(20):
        m = rng.integers(0, 2, size=L).astype(np.uint8)
        cf = synthesize_counterfactual(target, donor, DisentanglementMask(m, 0.5)).tokens
        keep = torch.from_numpy(m.astype(bool))
        assert torch.equal(cf[keep], t_target[keep])
        assert torch.equal(cf[~keep], t_donor[~keep])
        # partition identities in multiplication form, bit-exact
        mm = torch.from_numpy(m.astype(np.float64))[:, None]
        assert torch.equal(mm * cf, mm * t_target)
        assert torch.equal((1 - mm) * cf, (1 - mm) * t_donor)

    with pytest.raises(ShapeMismatch):
        bad = TokenFeatureMap(torch.zeros(L, 8), attn, GRID)
        synthesize_counterfactual(target, bad, ones)


def test_consistency_loss_examples():
    state = OimState.create(num_identities=4, embed_dim=8)
    e = torch.zeros(8, dtype=torch.float64)
    e[0] = 1.0
    same = counterfactual_consistency_loss(e, e, 0, state)
    from tbpslab.losses import oim_classification_loss

    ce_only = oim_classification_loss(e, 0, state)
    assert torch.allclose(same, ce_only)  # consistency term is exactly 0

    f = torch.zeros(8, dtype=torch.float64)
    f[1] = 1.0
    ortho = counterfactual_consistency_loss(e, f, 0, state)
    ce_f = oim_classification_loss(f, 0, state)
    assert float(ortho - ce_f) == pytest.approx(2.0, abs=1e-12)


def test_consistency_loss_nonnegative_finite():
    rng = np.random.default_rng(9)
    state = OimState.create(num_identities=6, embed_dim=16)
    for _ in range(50):
        u = torch.from_numpy(rng.normal(size=16))
        u = u / u.norm()
        v = torch.from_numpy(rng.normal(size=16))
        v = v / v.norm()
        val = counterfactual_consistency_loss(u, v, int(rng.integers(0, 6)), state)
        assert torch.isfinite(val) and float(val) >= 0.0
