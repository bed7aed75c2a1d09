import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbpslab.errors import DomainError, EmptyPool
from tbpslab.geometry import (
    BoundingBox,
    generate_candidate_pool,
    iou,
    triangular_membership,
    visibility,
)

boxes = st.builds(
    BoundingBox,
    x=st.floats(-50, 150), y=st.floats(-50, 150),
    w=st.floats(0.5, 80), h=st.floats(0.5, 80),
)


def test_iou_identity():
    b = BoundingBox(3, 4, 10, 20)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 5, 5)) == 0.0


def test_iou_half_shift():
    a = BoundingBox(0, 0, 10, 10)
    b = BoundingBox(5, 0, 10, 10)
    assert iou(a, b) == pytest.approx(50.0 / 150.0, abs=1e-12)


@given(a=boxes, b=boxes)
@settings(max_examples=200, deadline=None)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert iou(a, a) == 1.0


def test_box_requires_positive_extent():
    with pytest.raises(DomainError):
        BoundingBox(0, 0, 0, 5)


def test_visibility_examples():
    gt = BoundingBox(10, 10, 20, 10)
    assert visibility(gt, gt) == 1.0
    assert visibility(BoundingBox(100, 100, 5, 5), gt) == 0.0
    left_half = BoundingBox(10, 10, 10, 10)
    assert visibility(left_half, gt) == pytest.approx(0.5, abs=1e-12)


def test_visibility_monotone_under_translation():
    gt = BoundingBox(20, 20, 16, 24)
    rng = np.random.default_rng(0)
    for _ in range(50)        :
        w, h = rng.uniform(8, 30, size=2)
        prev = None
        for shift in np.linspace(0, 40, 9):
            cand = BoundingBox(20 + shift, 20, w, h)
            vis = visibility(cand, gt)
            if prev is not None:
                assert vis <= prev + 1e-12
            prev = vis


def test_triangular_membership():
    assert triangular_membership(0.6, 0.3, 0.6, 0.9) == 1.0
    assert triangular_membership(0.3, 0.3, 0.6, 0.9) == 0.0
    assert triangular_membership(0.45, 0.3, 0.6, 0.9) == pytest.approx(0.5, abs=1e-12)
    assert triangular_membership(2.0, 0.3, 0.6, 0.9) == 0.0
    with pytest.raises(DomainError):
        triangular_membership(0.5, 0.6, 0.6, 0.9)
    with pytest.raises(DomainError):
        triangular_membership(0.5, 0.3, 0.9, 0.6)


def test_pool_identity_grid_recovers_gt():
    gt = BoundingBox(12.0, 9.0, 20.0, 30.0)
    pool = generate_candidate_pool(gt, [0.0], [1.0], bounds=(128, 96))
    assert pool.candidates == (gt,)


def test_pool_size_and_dedup():
    gt = BoundingBox(40, 30, 20, 30)
    shifts, scales = (-0.2, 0.0, 0.2), (0.8, 1.0, 1.2)
    pool = generate_candidate_pool(gt, shifts, scales, bounds=(128, 96))
    assert len(pool) <= 81
    # exhaustive duplicate check
    seen = [c.as_tuple() for c in pool.candidates]
    assert len(seen) == len(set(seen))
    # independent recomputation of the full transform set
    expected = set()
    for sx in shifts:
        for sy in shifts:
            for kw in scales:
                for kh in scales:
                    w, h = gt.w * kw, gt.h * kh
                    x = gt.x + sx * gt.w + 0.5 * (gt.w - w)
                    y = gt.y + sy * gt.h + 0.5 * (gt.h - h)
                    x1, y1 = max(x, 0.0), max(y, 0.0)
                    x2, y2 = min(x + w, 128.0), min(y + h, 96.0)
                    if x2 - x1 >= 1.0 and y2 - y1 >= 1.0:
                        expected.add((x1, y1, x2 - x1, y2 - y1))
    assert set(seen) == expected


def test_pool_clipping_at_corner():
    gt = BoundingBox(0, 0, 20, 30)
    pool = generate_candidate_pool(gt, (-0.5, 0.0), (1.0,), bounds=(128, 96))
    for cand in pool.candidates:
        assert cand.x >= 0 and cand.y >= 0
        assert cand.x2 <= 128 and cand.y2 <= 96
        assert cand.w >= 1 and cand.h >= 1


def test_pool_closure_random_boxes():
    rng = np.random.default_rng(1)
    shifts, scales = (-0.3, -0.15, 0.0, 0.15, 0.3), (0.7, 0.85, 1.0, 1.15, 1.3)
    for _ in range(100):
        gt = BoundingBox(
            float(rng.uniform(0, 100)), float(rng.uniform(0, 70)),
            float(rng.uniform(4, 40)), float(rng.uniform(4, 40)),
        )
        pool = generate_candidate_pool(gt, shifts, scales, bounds=(128, 96))
        for cand in pool.candidates:
            assert -1e-9 <= cand.x and cand.x2 <= 128 + 1e-9
            assert -1e-9 <= cand.y and cand.y2 <= 96 + 1e-9


def test_pool_empty_when_all_degenerate():
    gt = BoundingBox(200, 200, 5, 5)  # entirely out of bounds
    with pytest.raises(EmptyPool):
        generate_candidate_pool(gt, [0.0], [1.0], bounds=(64, 64))
    with pytest.raises(DomainError):
        generate_candidate_pool(gt, [], [1.0], bounds=(64, 64))
