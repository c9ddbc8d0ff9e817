"""Seeded random masking of non-empty voxels."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .rng import SplitMix64

DEFAULT_RATIO = 0.7


@dataclass
class MaskSpec:
    ratio: float
    seed: int
    masked_ids: np.ndarray
    visible_ids: np.ndarray


def mask_count(n: int, ratio: float) -> int:
    """round(ratio * n), half-to-even, on the exact decimal value of ``ratio``.

    A float product hides ties (0.7 * 45 evaluates to 31.499999999999996).
    """
    return int(round(Fraction(repr(float(ratio))) * n))


def shuffled(ids, seed: int) -> list:
    """Fisher-Yates shuffle driven by the splitmix64 stream of ``seed``."""
    out = list(ids)
    stream = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = stream.bounded(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def select_mask(nonempty_ids, ratio: float = DEFAULT_RATIO, seed: int = 0) -> MaskSpec:
    ids = np.asarray(nonempty_ids, dtype=np.int64).reshape(-1)
    if ids.size > 1 and not np.all(ids[1:] > ids[:-1]):
        raise ValueError("ids must be ascending and unique")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    k = mask_count(ids.size, ratio)
    order = shuffled(ids.tolist(), seed)
    masked = np.sort(np.asarray(order[:k], dtype=np.int64))
    visible = np.sort(np.asarray(order[k:], dtype=np.int64))
    return MaskSpec(float(ratio), int(seed), masked, visible)
