"""Per-band patchification, per-band linear projections and spectral group pooling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyGroupError, EmptySubsetError, ShapeError, UnknownBandError, ValidationError
from .geometry import GeometryConfig, SpectralGroup

POOL_MODES = ("average", "sum")


@dataclass
class BandRaster:
    band_name: str
    pixels: np.ndarray
    gsd: float
    footprint_m: float

    def __post_init__(self):
        a = np.asarray(self.pixels)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"{self.band_name}: raster must be square, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ShapeError(f"{self.band_name}: raster has non-finite values")


@dataclass
class TokenBatch:
    """One sample's tokens with per-token metadata.  ``mask`` is True where hidden."""

    tokens: np.ndarray
    group_id: np.ndarray
    sensor_id: np.ndarray
    row: np.ndarray
    col: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return self.tokens.shape[0]


@dataclass(frozen=True)
class TokenLayout:
    """Which groups and bands a sequence carries, and where each group's tokens sit."""

    groups: tuple[SpectralGroup, ...]
    bands: tuple[tuple[str, ...], ...]

    @classmethod
    def build(cls, config: GeometryConfig, band_subset: Sequence[str]) -> "TokenLayout":
        active = config.active_groups(band_subset)
        return cls(tuple(g for g, _ in active), tuple(k for _, k in active))

    @property
    def seq_len(self) -> int:
        return sum(g.n_patches for g in self.groups)

    @property
    def band_keys(self) -> tuple[str, ...]:
        return tuple(k for ks in self.bands for k in ks)

    def slices(self) -> list[slice]:
        out, start = [], 0
        for g in self.groups:
            out.append(slice(start, start + g.n_patches))
            start += g.n_patches
        return out

    def meta(self) -> dict[str, np.ndarray]:
        gid, sid, row, col = [], [], [], []
        for g in self.groups:
            r, c = np.divmod(np.arange(g.n_patches), g.patch_count)
            gid.append(np.full(g.n_patches, g.id))
            sid.append(np.full(g.n_patches, g.sensor_id))
            row.append(r)
            col.append(c)
        cat = lambda xs: np.concatenate(xs).astype(np.int64)
        return {"group_id": cat(gid), "sensor_id": cat(sid), "row": cat(row), "col": cat(col)}

    def to_list(self) -> list[dict]:
        return [{"group_id": g.id, "sensor_id": g.sensor_id, "patch_count": g.patch_count, "bands": list(b)}
                for g, b in zip(self.groups, self.bands)]


def patchify(pixels: np.ndarray, p: int, s: int) -> np.ndarray:
    """``[..., p*s, p*s]`` raster to ``[..., p*p, s*s]``; row-major over patches and pixels."""
    a = np.asarray(pixels)
    if a.shape[-2:] != (p * s, p * s):
        raise ShapeError(f"raster side {a.shape[-2:]} != {p}*{s}")
    lead = a.shape[:-2]
    a = a.reshape(lead + (p, s, p, s))
    a = np.moveaxis(a, -3, -2)  # [..., p, p, s, s]
    return a.reshape(lead + (p * p, s * s))


def unpatchify(patches: np.ndarray, p: int, s: int) -> np.ndarray:
    a = np.asarray(patches)
    lead = a.shape[:-2]
    a = a.reshape(lead + (p, p, s, s))
    a = np.moveaxis(a, -2, -3)
    return a.reshape(lead + (p * s, p * s))


def projection_names(band_key: str) -> tuple[str, str]:
    sensor, band = band_key.split("/", 1)
    base = f"embed.{sensor}.{band}"
    return base + ".weight", base + ".bias"


def project_band(params: Mapping[str, np.ndarray], band_key: str, patches: np.ndarray) -> np.ndarray:
    """Affine projection of ``[..., n, s*s]`` patches to ``[..., n, d_model]``."""
    wn, bn = projection_names(band_key)
    if wn not in params:
        raise UnknownBandError(f"no projection for band {band_key!r}")
    W, b = params[wn], params[bn]
    if patches.shape[-1] != W.shape[0]:
        raise ShapeError(f"{band_key}: patch length {patches.shape[-1]} != projection input {W.shape[0]}")
    return patches @ W + b


def group_pool(per_band: Sequence[np.ndarray], mode: str = "average") -> np.ndarray:
    if not per_band:
        raise EmptyGroupError("no bands to pool")
    shape = per_band[0].shape
    if any(e.shape != shape for e in per_band):
        raise ShapeError("pooled embeddings must share a shape")
    total = per_band[0].copy()
    for e in per_band[1:]:
        total = total + e
    if mode == "sum":
        return total
    if mode == "average":
        return total / len(per_band)
    raise ValidationError(f"unknown pool mode {mode!r}")


def embed_sample(sample: Mapping[str, np.ndarray], band_subset: Sequence[str], config: GeometryConfig,
                 params: Mapping[str, np.ndarray], pool: str = "average") -> TokenBatch:
    """Project and pool one sample's bands into tokens ordered (sensor, group, row-major).

    ``sample`` maps qualified band keys to 2-D pixel arrays.  No encodings are added.
    """
    if not band_subset:
        raise EmptySubsetError("band subset is empty")
    for k in band_subset:
        if k not in sample:
            raise UnknownBandError(f"sample has no band {k!r}")
    layout = TokenLayout.build(config, band_subset)
    parts = []
    for g, keys in zip(layout.groups, layout.bands):
        emb = [project_band(params, k, patchify(sample[k], g.patch_count, g.patch_size)) for k in keys]
        parts.append(group_pool(emb, pool))
    meta = layout.meta()
    tokens = np.concatenate(parts, axis=0)
    return TokenBatch(tokens, meta["group_id"], meta["sensor_id"], meta["row"], meta["col"],
                      np.zeros(len(tokens), dtype=bool))


def init_projection(rng: np.random.Generator, patch_size: int, d_model: int, dtype=np.float32):
    """Uniform in +-1/sqrt(s^2) weights, zero bias."""
    bound = 1.0 / np.sqrt(patch_size * patch_size)
    W = rng.uniform(-bound, bound, size=(patch_size * patch_size, d_model)).astype(dtype)
    return W, np.zeros(d_model, dtype=dtype)
