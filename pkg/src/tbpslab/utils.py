"""Small shared helpers."""
from __future__ import annotations

import math


def round_half_up(x: float) -> int:
    """round() with ties away from zero, so count formulas are predictable."""
    return int(math.floor(x + 0.5))
