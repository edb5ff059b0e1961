"""Inconsistent random spatial masking with equal masked ground cover per group.

Randomness comes from numpy's Philox (a counter-based generator): a sample's
stream is keyed by ``seed ^ sample_index``; each group in token order consumes
``count`` raw uint64 draws which drive a partial Fisher-Yates shuffle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import RatioError
from .geometry import SpectralGroup

RNG_NAME = "philox4x64"


def mask_count(p: int, r: float) -> int:
    """``floor(p^2 * r)``."""
    if p < 1:
        raise RatioError(f"patch count must be >= 1, got {p}")
    if not 0.0 < r < 1.0:
        raise RatioError(f"mask ratio must be in (0, 1), got {r}")
    return int(math.floor(p * p * r))


@dataclass(frozen=True)
class MaskPlan:
    ratio: float
    per_group_count: dict
    seed: int
    group_order: tuple[int, ...]
    patch_counts: dict

    @classmethod
    def build(cls, groups: Sequence[SpectralGroup], ratio: float, seed: int) -> "MaskPlan":
        counts = {g.id: mask_count(g.patch_count, ratio) for g in groups}
        for g in groups:
            if counts[g.id] >= g.n_patches:
                raise RatioError(f"group {g.id}: masking {counts[g.id]} of {g.n_patches} leaves nothing visible")
        return cls(float(ratio), counts, int(seed) & 0xFFFFFFFFFFFFFFFF,
                   tuple(g.id for g in groups), {g.id: g.patch_count for g in groups})


def _stream(seed: int, sample_index: int) -> np.random.Philox:
    return np.random.Philox(key=(seed ^ sample_index) & 0xFFFFFFFFFFFFFFFF)


def sample_masks(plan: MaskPlan, sample_index: int = 0) -> dict[int, np.ndarray]:
    """Boolean ``[p, p]`` grid per group id, True where masked.  Deterministic."""
    bitgen = _stream(plan.seed, sample_index)
    out = {}
    for gid in plan.group_order:
        p = plan.patch_counts[gid]
        k = plan.per_group_count[gid]
        draws = np.asarray(bitgen.random_raw(k), dtype=np.uint64).reshape(k)
        perm = kernels.partial_shuffle(p * p, draws)
        grid = np.zeros(p * p, dtype=bool)
        grid[perm[:k]] = True
        out[gid] = grid.reshape(p, p)
    return out


def flat_mask(plan: MaskPlan, sample_index: int = 0) -> np.ndarray:
    """Masks concatenated in token order as one boolean vector."""
    grids = sample_masks(plan, sample_index)
    return np.concatenate([grids[g].reshape(-1) for g in plan.group_order])


def batch_masks(plan: MaskPlan, sample_indices: Sequence[int]) -> np.ndarray:
    return np.stack([flat_mask(plan, int(i)) for i in sample_indices])
