"""Synthetic multi-sensor scenes with multi-label land-cover targets.

Each scene draws a few land-cover classes, builds smooth random membership
fields for them on a 1 m grid, renders every band as a membership-weighted
mix of a per-(class, band) reflectance table plus pixel noise, and downsamples
each band to its native GSD.  A class is a label when it owns at least 1% of
the scene.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..geometry import GeometryConfig
from .ops import bilinear_resample
from .raster import Annotation, RasterRecord
from .store import _assemble, compute_norm_stats, write_store

BASE_TIME = 1_600_000_000
TILE_SPACING_M = 10_000.0
LATENT_GSD = 1.0


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 6
    max_classes_per_scene: int = 3
    smoothness_m: float = 24.0
    sharpness: float = 4.0
    noise: float = 0.01
    val_fraction: float = 0.25
    min_area: float = 0.01


def reflectance_table(seed: int, n_classes: int, n_bands: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xBEEF])
    return rng.uniform(0.05, 0.6, size=(n_classes, n_bands))


def _scene(seed, index, geometry: GeometryConfig, cfg: SynthConfig, table):
    rng = np.random.default_rng([seed, index])
    side = int(round(geometry.footprint.image_footprint_m / LATENT_GSD))
    k = int(rng.integers(1, cfg.max_classes_per_scene + 1))
    present = np.sort(rng.choice(cfg.n_classes, size=min(k, cfg.n_classes), replace=False))
    sigma = cfg.smoothness_m / LATENT_GSD
    fields = np.stack([gaussian_filter(rng.standard_normal((side, side)), sigma, mode="wrap") for _ in present])
    fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
    fields += rng.normal(0.0, 0.5, size=(len(present), 1, 1))
    z = cfg.sharpness * fields
    z -= z.max(axis=0, keepdims=True)
    member = np.exp(z)
    member /= member.sum(axis=0, keepdims=True)
    hard = present[member.argmax(axis=0)]
    area = np.array([(hard == c).mean() for c in range(cfg.n_classes)])
    labels = (area >= cfg.min_area).astype(np.int8)

    col = 0
    bands = {}
    for g in geometry.groups:
        sname = geometry.sensor(g.sensor_id).name
        for b in g.band_names:
            refl = np.tensordot(table[present, col], member, axes=1)
            refl = refl + rng.normal(0.0, cfg.noise, size=refl.shape)
            bands[(sname, b)] = bilinear_resample(refl, LATENT_GSD, g.gsd).astype(np.float32)
            col += 1

    origin = (float(index % 100) * TILE_SPACING_M, float(index // 100) * TILE_SPACING_M)
    anns = []
    for c in np.nonzero(labels)[0]:
        rr, cc = np.nonzero(hard == c)
        j = int(rng.integers(len(rr)))
        anns.append(Annotation(f"class{c}", point=(origin[0] + cc[j] + 0.5, origin[1] + rr[j] + 0.5)))
    t0 = BASE_TIME + index * 86_400
    records = []
    for s in sorted(geometry.sensors, key=lambda s: s.sensor_id):
        t = t0 if s.sensor_id == 0 else t0 + int(rng.integers(-5 * 86_400, 5 * 86_400))
        sb = {b: bands[(s.name, b)] for b in s.band_names}
        gsd = {b: g.gsd for g in s.groups for b in g.band_names}
        records.append(RasterRecord(f"{s.name}-{index:06d}", s.name, origin, geometry.footprint.image_footprint_m,
                                    t, sb, gsd, anns if s.sensor_id == 0 else []))
    return records, labels


def synth_generate(seed: int, n_samples: int, geometry: GeometryConfig, cfg: SynthConfig = SynthConfig(),
                   workers: int = 1):
    """Build ``(records, sample_entries, classes, norm_stats)``; deterministic in ``seed``."""
    n_bands = sum(len(g.band_names) for g in geometry.groups)
    table = reflectance_table(seed, cfg.n_classes, n_bands)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scenes = list(pool.map(lambda i: _scene(seed, i, geometry, cfg, table), range(n_samples)))
    else:
        scenes = [_scene(seed, i, geometry, cfg, table) for i in range(n_samples)]
    n_val = int(round(n_samples * cfg.val_fraction))
    records, entries, assembled = [], [], []
    for i, (recs, labels) in enumerate(scenes):
        split = "val" if i >= n_samples - n_val else "train"
        records.extend(recs)
        entries.append({"id": f"s{i:06d}", "records": [r.id for r in recs], "labels": labels, "split": split})
        assembled.append(_assemble(entries[-1]["id"], recs, labels, split))
    classes = [f"class{c}" for c in range(cfg.n_classes)]
    train = [s for s in assembled if s.split == "train"] or assembled
    return records, entries, classes, compute_norm_stats(train), assembled


def write_synthetic(directory, seed: int, n_samples: int, geometry: GeometryConfig,
                    cfg: SynthConfig = SynthConfig(), workers: int = 1) -> dict:
    records, entries, classes, stats, _ = synth_generate(seed, n_samples, geometry, cfg, workers)
    extra = {"synth": {"seed": seed, "n_samples": n_samples, **cfg.__dict__}, "geometry": geometry.to_dict()}
    return write_store(directory, records, entries, classes, stats, extra)
