"""Axis-aligned box arithmetic, candidate pools and fuzzy-membership primitives.

Everything here is pure and float-exact; the spatial-intervention scorer and
the retrieval evaluator both build on these functions.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence

from .errors import DomainError, EmptyPool


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle, (x, y) top-left corner, extents (w, h) in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DomainError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class CandidatePool:
    """A ground-truth box together with its shifted/scaled candidates."""

    gt: BoundingBox
    candidates: tuple[BoundingBox, ...]

    def __len__(self) -> int:
        return len(self.candidates)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    if a == b:  # exact identity; (x + w) - x need not round back to w
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def visibility(candidate: BoundingBox, gt: BoundingBox) -> float:
    """Fraction of the ground-truth box still covered by the candidate."""
    return intersection_area(candidate, gt) / gt.area


def triangular_membership(x: float, lo: float, peak: float, hi: float) -> float:
    """Triangular fuzzy membership: 0 outside (lo, hi), 1 at the peak, linear between."""
    if not (lo < peak < hi):
        raise DomainError(f"window must satisfy lo < peak < hi, got ({lo}, {peak}, {hi})")
    if x <= lo or x >= hi:
        return 0.0
    if x <= peak:
        return (x - lo) / (peak - lo)
    return (hi - x) / (hi - peak)


def clip_box(box: BoundingBox, bounds: tuple[float, float]) -> BoundingBox | None:
    """Clip a box to [0, W] x [0, H]; None if less than 1 px survives on an axis."""
    w_img, h_img = bounds
    x1 = max(box.x, 0.0)
    y1 = max(box.y, 0.0)
    x2 = min(box.x2, float(w_img))
    y2 = min(box.y2, float(h_img))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return None
    return BoundingBox(x1, y1, x2 - x1, y2 - y1)


def generate_candidate_pool(
    gt: BoundingBox,
    shift_fracs: Sequence[float],
    scale_facs: Sequence[float],
    bounds: tuple[float, float],
) -> CandidatePool:
    """Build the intervention candidate pool around a ground-truth box.

    The pool is the Cartesian product {shift_x} x {shift_y} x {scale_w} x {scale_h}.
    Shifts are fractions of (w, h); scaling is anchored at the box center. Every
    candidate is clipped to the image bounds; candidates degenerating below 1 px
    are dropped and exact duplicates are removed (first occurrence kept, which
    fixes the deterministic tie-break order used downstream).
    """
    if not shift_fracs or not scale_facs:
        raise DomainError("shift_fracs and scale_facs must be non-empty")
    seen: set[tuple[float, float, float, float]] = set()
    kept: list[BoundingBox] = []
    for sx, sy, kw, kh in product(shift_fracs, shift_fracs, scale_facs, scale_facs):
        w = gt.w * kw
        h = gt.h * kh
        # written so the identity transform (shift 0, scale 1) is bit-exact
        x = gt.x + sx * gt.w + 0.5 * (gt.w - w)
        y = gt.y + sy * gt.h + 0.5 * (gt.h - h)
        if w <= 0 or h <= 0:
            continue
        clipped = clip_box(BoundingBox(x, y, w, h), bounds)
        if clipped is None:
            continue
        key = clipped.as_tuple()
        if key in seen:
            continue
        seen.add(key)
        kept.append(clipped)
    if not kept:
        raise EmptyPool("all candidates degenerate after clipping")
    return CandidatePool(gt=gt, candidates=tuple(kept))


def boxes_from_tuples(tuples: Iterable[Sequence[float]]) -> list[BoundingBox]:
    return [BoundingBox(*t) for t in tuples]
