"""Sine-cosine positional, superpositional, spectral-group and sensor encodings."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import AllocationError, DimensionError, DivisibilityError, ValidationError
from .geometry import GeometryConfig, SpectralGroup, fine_grid_offset

GROUP_INDEX_MODES = ("pretrain", "finetune")


@dataclass(frozen=True)
class EncodingParams:
    d_model: int
    pos_dim: int
    group_dim: int = 0
    sensor_dim: int = 0
    omega: float = 10000.0
    superpositional: bool = True
    group_index_mode: str = "pretrain"

    def __post_init__(self):
        if self.pos_dim + self.group_dim + self.sensor_dim != self.d_model:
            raise AllocationError(
                f"pos {self.pos_dim} + group {self.group_dim} + sensor {self.sensor_dim} != d_model {self.d_model}"
            )
        if self.pos_dim <= 0 or self.pos_dim % 4:
            raise AllocationError(f"pos_dim {self.pos_dim} must be a positive multiple of 4")
        if self.group_dim % 2 or self.sensor_dim % 2 or self.group_dim < 0 or self.sensor_dim < 0:
            raise AllocationError("group_dim and sensor_dim must be nonnegative and even")
        if self.group_index_mode not in GROUP_INDEX_MODES:
            raise ValidationError(f"group_index_mode must be one of {GROUP_INDEX_MODES}")

    @classmethod
    def allocate(cls, d_model: int, group: bool = True, sensor: bool = False, **kw) -> "EncodingParams":
        """Default split: 3/4 positional (multiple of 4), rest to the enabled extras."""
        if not (group or sensor):
            return cls(d_model, d_model, 0, 0, **kw)
        pos = 4 * int(round(0.75 * d_model / 4))
        rest = d_model - pos
        if group and sensor:
            g = s = rest // 2
            if g % 2 or 2 * g != rest:
                raise AllocationError(f"cannot split {rest} evenly into two even halves")
        else:
            g, s = (rest, 0) if group else (0, rest)
        return cls(d_model, pos, g, s, **kw)

    def with_dim(self, d_model: int) -> "EncodingParams":
        """Same flags and proportions at another width (e.g. the decoder's)."""
        return EncodingParams.allocate(
            d_model, group=self.group_dim > 0, sensor=self.sensor_dim > 0, omega=self.omega,
            superpositional=self.superpositional, group_index_mode=self.group_index_mode,
        )

    def replace_mode(self, mode: str) -> "EncodingParams":
        d = asdict(self)
        d["group_index_mode"] = mode
        return EncodingParams(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def sincos_1d(pos, d: int, omega: float = 10000.0) -> np.ndarray:
    """``out[2i] = sin(pos / omega**(2i/d))``, ``out[2i+1] = cos(...)``.

    ``pos`` may be a scalar or an array; the encoding axis is appended.
    """
    if d < 2 or d % 2:
        raise DimensionError(f"encoding dim must be even and >= 2, got {d}")
    pos = np.asarray(pos, dtype=np.float64)
    i = np.arange(d // 2, dtype=np.float64)
    angle = pos[..., None] / omega ** (2.0 * i / d)
    out = np.empty(pos.shape + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def posenc_2d(row, col, pos_dim: int, omega: float = 10000.0) -> np.ndarray:
    """Row half followed by column half."""
    if pos_dim % 4:
        raise DimensionError(f"pos_dim must be divisible by 4, got {pos_dim}")
    row, col = np.broadcast_arrays(np.asarray(row, dtype=np.float64), np.asarray(col, dtype=np.float64))
    return np.concatenate([sincos_1d(row, pos_dim // 2, omega), sincos_1d(col, pos_dim // 2, omega)], axis=-1)


def _grid(n: int, offset: float) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n, dtype=np.float64) + offset
    return np.meshgrid(idx, idx, indexing="ij")


def reference_encodings(config: GeometryConfig, params: EncodingParams) -> np.ndarray:
    """Vanilla encodings of the reference grid, shape ``[p_ref, p_ref, pos_dim]``."""
    fp = config.footprint
    off = fine_grid_offset(fp.image_footprint_m, fp.max_footprint_m, fp.fine_patch_extent_m)
    rows, cols = _grid(config.reference_patch_count, off)
    return posenc_2d(rows, cols, params.pos_dim, params.omega)


def superpositional(group: SpectralGroup, config: GeometryConfig, params: EncodingParams) -> np.ndarray:
    """Positional encodings of ``group`` as ``[p^2, pos_dim]`` (row-major).

    Each patch gets the mean of the reference-grid encodings it covers; the
    reference group itself (one cell per patch) gets vanilla encodings.
    """
    p_ref = config.reference_patch_count
    if p_ref % group.patch_count:
        raise DivisibilityError(f"group {group.id}: {group.patch_count} does not divide {p_ref}")
    b = p_ref // group.patch_count
    ref = reference_encodings(config, params)
    if b == 1:
        return ref.reshape(-1, params.pos_dim)
    return kernels.block_mean(ref, b).reshape(-1, params.pos_dim)


def vanilla(group: SpectralGroup, config: GeometryConfig, params: EncodingParams) -> np.ndarray:
    """Plain encodings on the group's own patch grid, placed concentrically."""
    fp = config.footprint
    off = fine_grid_offset(fp.image_footprint_m, fp.max_footprint_m, group.patch_extent_m)
    rows, cols = _grid(group.patch_count, off)
    return posenc_2d(rows, cols, params.pos_dim, params.omega).reshape(-1, params.pos_dim)


def group_encoding(sp: int, group_dim: int, omega: float = 10000.0) -> np.ndarray:
    return sincos_1d(float(sp), group_dim, omega)


def sensor_encoding(s: int, sensor_dim: int, omega: float = 10000.0) -> np.ndarray:
    return sincos_1d(float(s), sensor_dim, omega)


def group_indices(groups: Sequence[SpectralGroup], mode: str) -> dict[int, int]:
    """Index fed to the group encoding for each group id.

    ``pretrain`` keeps configured ids; ``finetune`` renumbers the groups
    present, in token order, from zero.
    """
    if mode == "pretrain":
        return {g.id: g.id for g in groups}
    if mode == "finetune":
        return {g.id: i for i, g in enumerate(groups)}
    raise ValidationError(f"unknown group index mode {mode!r}")


def compose(config: GeometryConfig, params: EncodingParams, band_subset: Sequence[str] | None = None) -> np.ndarray:
    """Per-token ``[positional | group | sensor]`` table, ``[seq_len, d_model]`` float64."""
    if band_subset is None:
        band_subset = config.all_bands()
    groups = [g for g, _ in config.active_groups(band_subset)]
    idx = group_indices(groups, params.group_index_mode)
    rows = []
    for g in groups:
        pos = superpositional(g, config, params) if params.superpositional else vanilla(g, config, params)
        parts = [pos]
        if params.group_dim:
            parts.append(np.broadcast_to(group_encoding(idx[g.id], params.group_dim, params.omega), (g.n_patches, params.group_dim)))
        if params.sensor_dim:
            parts.append(np.broadcast_to(sensor_encoding(g.sensor_id, params.sensor_dim, params.omega), (g.n_patches, params.sensor_dim)))
        rows.append(np.concatenate(parts, axis=1))
    return np.concatenate(rows, axis=0)


def cosine_similarity_map(coarse: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Cosine similarity of each coarse encoding against every reference one.

    ``coarse`` is ``[n, d]``, ``reference`` is ``[P, P, d]``; returns ``[n, P, P]``.
    """
    ref = reference.reshape(-1, reference.shape[-1])
    a = coarse / np.linalg.norm(coarse, axis=1, keepdims=True)
    b = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    p = reference.shape[0]
    return (a @ b.T).reshape(-1, p, p)
