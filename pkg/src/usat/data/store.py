"""On-disk raster store: a directory of raster files plus ``manifest.json``."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import USatError, ValidationError
from ..geometry import GeometryConfig
from .ops import bilinear_resample, crop_to, pair_images, to_multilabel
from .raster import RasterRecord

log = logging.getLogger(__name__)

FORMAT = "usat-store/1"


@dataclass
class Sample:
    """Aligned rasters of one ground square, keyed ``sensor/band``."""

    id: str
    bands: dict[str, np.ndarray]
    labels: np.ndarray
    timestamps: dict[str, int] = field(default_factory=dict)
    split: str = "train"
    footprint_m: float = 0.0
    origin_m: tuple[float, float] = (0.0, 0.0)


@dataclass
class Dataset:
    samples: list[Sample]
    classes: list[str]
    norm_stats: dict[str, dict]
    footprint_m: float

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def normalize(self, sample: Sample, keys: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        keys = keys if keys is not None else list(sample.bands)
        out = {}
        for k in keys:
            st = self.norm_stats[k]
            out[k] = ((sample.bands[k] - st["mean"]) / st["std"]).astype(np.float32)
        return out


def compute_norm_stats(samples: Sequence[Sample]) -> dict[str, dict]:
    """Two-pass per-band mean and (population) std over all pixels of ``samples``."""
    keys = sorted({k for s in samples for k in s.bands})
    stats = {}
    for k in keys:
        arrays = [s.bands[k] for s in samples if k in s.bands]
        n = sum(a.size for a in arrays)
        mean = sum(float(np.sum(a, dtype=np.float64)) for a in arrays) / n
        var = sum(float(np.sum((a.astype(np.float64) - mean) ** 2)) for a in arrays) / n
        stats[k] = {"mean": mean, "std": float(np.sqrt(var)) or 1.0, "count": n}
    return stats


def _assemble(sample_id, records: Sequence[RasterRecord], labels, split) -> Sample:
    bands, ts = {}, {}
    for r in records:
        ts[r.sensor] = r.timestamp
        for name, a in r.bands.items():
            bands[f"{r.sensor}/{name}"] = a
    first = records[0]
    return Sample(sample_id, bands, np.asarray(labels, dtype=np.int8), ts, split, first.footprint_m, first.origin_m)


def write_store(directory, records: Sequence[RasterRecord], samples: Sequence[dict], classes: Sequence[str],
                norm_stats: dict | None = None, extra: dict | None = None) -> dict:
    """Write rasters and the manifest.  ``samples`` entries: id, records, labels, split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [r.save(directory) for r in records]
    manifest = {
        "format": FORMAT,
        "classes": list(classes),
        "records": entries,
        "samples": [
            {"id": s["id"], "records": list(s["records"]), "labels": [int(x) for x in s["labels"]],
             "split": s.get("split", "train")}
            for s in samples
        ],
        "norm_stats": norm_stats or {},
    }
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{directory}: no manifest.json")
    with open(path, encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("format") != FORMAT:
        raise ValidationError(f"{directory}: unsupported store format {m.get('format')!r}")
    return m


def load_records(directory) -> dict[str, RasterRecord]:
    m = read_manifest(directory)
    return {e["id"]: RasterRecord.load(directory, e) for e in m["records"]}


def load_dataset(directory) -> Dataset:
    m = read_manifest(directory)
    records = load_records(directory)
    samples = [_assemble(s["id"], [records[r] for r in s["records"]], s["labels"], s["split"]) for s in m["samples"]]
    if not samples:
        raise ValidationError(f"{directory}: store has no samples")
    stats = m.get("norm_stats") or compute_norm_stats([s for s in samples if s.split == "train"] or samples)
    return Dataset(samples, list(m["classes"]), stats, samples[0].footprint_m)


def pair_stores(fine_dir, coarse_dir, out_dir, geometry: GeometryConfig, fine_sensor: str = "naip") -> dict:
    """Pairing pipeline: match by containment and time, crop, keep complete
    pairs, resample to native GSD, relabel from annotations, write a store."""
    fine_m, coarse_m = read_manifest(fine_dir), read_manifest(coarse_dir)
    fine_all = load_records(fine_dir)
    coarse_all = load_records(coarse_dir)
    fine = [r for r in fine_all.values() if r.sensor == fine_sensor]
    classes = list(dict.fromkeys(list(fine_m["classes"]) + list(coarse_m["classes"])))
    split_of = {rid: s["split"] for s in fine_m["samples"] for rid in s["records"]}
    coarse_sensors = [s.name for s in geometry.sensors if s.name != fine_sensor]
    if not coarse_sensors:
        raise ValidationError("geometry has no coarse sensor to pair with")

    native = {}
    for g in geometry.groups:
        sname = geometry.sensor(g.sensor_id).name
        for b in g.band_names:
            native[(sname, b)] = g.gsd

    matches = {f.id: [] for f in fine}
    for sname in coarse_sensors:
        coarse = [r for r in coarse_all.values() if r.sensor == sname]
        paired = dict((f.id, c) for f, c in pair_images(fine, coarse))
        for f in fine:
            matches[f.id].append(paired.get(f.id))

    out_records, out_samples, dropped = [], [], 0
    for f in fine:
        if any(c is None for c in matches[f.id]):
            dropped += 1
            continue
        group = [f] + [crop_to(c, f.origin_m, f.footprint_m) for c in matches[f.id]]
        complete = all(b in r.bands for r in group for b in geometry.sensor(r.sensor).band_names)
        if not complete:
            dropped += 1
            continue
        ids = []
        for r in group:
            bands, gsd = {}, {}
            for b in geometry.sensor(r.sensor).band_names:
                dst = native[(r.sensor, b)]
                bands[b] = bilinear_resample(r.bands[b], r.gsd[b], dst).astype(np.float32)
                gsd[b] = dst
            rid = r.id if r is f else f"{r.id}@{f.id}"
            out_records.append(RasterRecord(rid, r.sensor, f.origin_m, f.footprint_m, r.timestamp, bands, gsd,
                                            list(r.annotations)))
            ids.append(rid)
        anns = [a for r in group for a in r.annotations]
        labels = to_multilabel(anns, f.origin_m, f.footprint_m, classes)
        out_samples.append({"id": f.id, "records": ids, "labels": labels, "split": split_of.get(f.id, "train")})
    if not out_samples:
        raise USatError("pairing produced no samples")
    log.info("paired %d samples, dropped %d fine records", len(out_samples), dropped)

    by_id = {r.id: r for r in out_records}
    assembled = [_assemble(s["id"], [by_id[r] for r in s["records"]], s["labels"], s["split"]) for s in out_samples]
    train = [s for s in assembled if s.split == "train"] or assembled
    return write_store(out_dir, out_records, out_samples, classes, compute_norm_stats(train))
