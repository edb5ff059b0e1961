"""Sensors, spectral groups, patch geometry and footprints."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .errors import (
    CoverageError,
    DivisibilityError,
    DuplicateIdError,
    EmptySubsetError,
    FootprintError,
    UnknownBandError,
    ValidationError,
)

REL_TOL = 1e-9


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=REL_TOL, abs_tol=0.0)


def _integral(x: float) -> int | None:
    r = round(x)
    if r > 0 and _close(x, r):
        return int(r)
    return None


@dataclass(frozen=True)
class SpectralGroup:
    """Bands of one sensor sharing a GSD; pooled into one token per patch."""

    id: int
    sensor_id: int
    band_names: tuple[str, ...]
    gsd: float
    patch_count: int
    patch_size: int

    @property
    def patch_extent_m(self) -> float:
        return self.patch_size * self.gsd

    @property
    def side(self) -> int:
        """Raster side in pixels."""
        return self.patch_count * self.patch_size

    @property
    def n_patches(self) -> int:
        return self.patch_count ** 2


@dataclass(frozen=True)
class SensorConfig:
    sensor_id: int
    name: str
    groups: tuple[SpectralGroup, ...]

    @property
    def band_names(self) -> tuple[str, ...]:
        return tuple(b for g in self.groups for b in g.band_names)


@dataclass(frozen=True)
class FootprintConfig:
    image_footprint_m: float
    max_footprint_m: float = 1280.0
    fine_patch_extent_m: float | None = None
    reference_group_id: int | None = None


@dataclass(frozen=True)
class GeometryConfig:
    """Footprint plus sensors.  ``fine_patch_extent_m`` and the reference
    group are filled in by :func:`make_geometry` when not given."""

    footprint: FootprintConfig
    sensors: tuple[SensorConfig, ...]

    # ---- lookups -------------------------------------------------------
    @property
    def groups(self) -> tuple[SpectralGroup, ...]:
        out = [g for s in sorted(self.sensors, key=lambda s: s.sensor_id) for g in sorted(s.groups, key=lambda g: g.id)]
        return tuple(out)

    def group(self, group_id: int) -> SpectralGroup:
        for g in self.groups:
            if g.id == group_id:
                return g
        raise KeyError(group_id)

    def sensor(self, key: int | str) -> SensorConfig:
        for s in self.sensors:
            if s.sensor_id == key or s.name == key:
                return s
        raise UnknownBandError(f"unknown sensor {key!r}")

    @property
    def fine_patch_extent_m(self) -> float:
        return self.footprint.fine_patch_extent_m

    @property
    def reference_patch_count(self) -> int:
        """Patch count of the reference grid at the current image footprint."""
        p = _integral(self.footprint.image_footprint_m / self.footprint.fine_patch_extent_m)
        if p is None:
            raise CoverageError(
                f"footprint {self.footprint.image_footprint_m} m is not a whole number of "
                f"{self.footprint.fine_patch_extent_m} m reference cells"
            )
        return p

    def all_bands(self) -> tuple[str, ...]:
        """Qualified band keys ``sensor/band`` in token order."""
        out = []
        for g in self.groups:
            sname = self.sensor(g.sensor_id).name
            out.extend(f"{sname}/{b}" for b in g.band_names)
        return tuple(out)

    def band_group(self, key: str) -> SpectralGroup:
        sname, band = key.split("/", 1)
        sensor = self.sensor(sname)
        for g in sensor.groups:
            if band in g.band_names:
                return g
        raise UnknownBandError(f"unknown band {key!r}")

    def resolve_bands(self, names: Iterable[str] | None = None,
                      sensors: Iterable[str] | None = None) -> tuple[str, ...]:
        """Turn user band names into qualified keys, in token order.

        A name is either qualified (``sentinel2/Red``) or bare (``Red``); bare
        names match that band in every selected sensor.  ``None`` means all.
        """
        allowed = set(sensors) if sensors is not None else {s.name for s in self.sensors}
        for s in allowed:
            self.sensor(s)
        keys = [k for k in self.all_bands() if k.split("/", 1)[0] in allowed]
        if names is None:
            chosen = set(keys)
        else:
            chosen = set()
            for name in names:
                name = name.strip()
                if not name:
                    continue
                hit = [k for k in keys if k == name or k.split("/", 1)[1] == name]
                if not hit:
                    raise UnknownBandError(f"unknown band {name!r} for sensors {sorted(allowed)}")
                chosen.update(hit)
        if not chosen:
            raise EmptySubsetError("band subset is empty")
        return tuple(k for k in keys if k in chosen)

    def active_groups(self, band_subset: Sequence[str]) -> list[tuple[SpectralGroup, tuple[str, ...]]]:
        """Groups with at least one selected band, with those band keys, in token order."""
        if not band_subset:
            raise EmptySubsetError("band subset is empty")
        sel = set(band_subset)
        for k in sel:
            self.band_group(k)
        out = []
        for g in self.groups:
            sname = self.sensor(g.sensor_id).name
            keys = tuple(f"{sname}/{b}" for b in g.band_names if f"{sname}/{b}" in sel)
            if keys:
                out.append((g, keys))
        return out

    # ---- derived configs ----------------------------------------------
    def refit(self, image_footprint_m: float) -> "GeometryConfig":
        """Same sensors, GSDs, patch sizes and reference grid at another footprint."""
        if image_footprint_m > self.footprint.max_footprint_m * (1 + REL_TOL):
            raise FootprintError(f"image footprint {image_footprint_m} exceeds max {self.footprint.max_footprint_m}")
        sensors = []
        for s in self.sensors:
            groups = []
            for g in s.groups:
                p = _integral(image_footprint_m / g.patch_extent_m)
                if p is None:
                    raise CoverageError(f"group {g.id}: {image_footprint_m} m is not a multiple of {g.patch_extent_m} m")
                groups.append(replace(g, patch_count=p))
            sensors.append(replace(s, groups=tuple(groups)))
        out = GeometryConfig(replace(self.footprint, image_footprint_m=float(image_footprint_m)), tuple(sensors))
        validate_config(out)
        return out

    # ---- serialization --------------------------------------------------
    def to_dict(self) -> dict:
        fp = self.footprint
        return {
            "image_footprint_m": fp.image_footprint_m,
            "max_footprint_m": fp.max_footprint_m,
            "fine_patch_extent_m": fp.fine_patch_extent_m,
            "reference_group_id": fp.reference_group_id,
            "sensors": [
                {
                    "sensor_id": s.sensor_id,
                    "name": s.name,
                    "groups": [
                        {
                            "id": g.id,
                            "bands": list(g.band_names),
                            "gsd": g.gsd,
                            "patch_count": g.patch_count,
                            "patch_size": g.patch_size,
                        }
                        for g in s.groups
                    ],
                }
                for s in self.sensors
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeometryConfig":
        known = {"image_footprint_m", "max_footprint_m", "fine_patch_extent_m", "reference_group_id", "sensors"}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown geometry keys: {sorted(extra)}")
        sensors = []
        for s in d["sensors"]:
            groups = tuple(
                SpectralGroup(
                    id=int(g["id"]),
                    sensor_id=int(s["sensor_id"]),
                    band_names=tuple(g["bands"]),
                    gsd=float(g["gsd"]),
                    patch_count=int(g["patch_count"]),
                    patch_size=int(g["patch_size"]),
                )
                for g in s["groups"]
            )
            sensors.append(SensorConfig(int(s["sensor_id"]), s["name"], groups))
        return make_geometry(
            sensors,
            image_footprint_m=float(d["image_footprint_m"]),
            max_footprint_m=float(d.get("max_footprint_m", 1280.0)),
            fine_patch_extent_m=d.get("fine_patch_extent_m"),
            reference_group_id=d.get("reference_group_id"),
        )


def _pick_reference(groups: Sequence[SpectralGroup]) -> SpectralGroup:
    return sorted(groups, key=lambda g: (-g.patch_count, g.gsd, g.id))[0]


def make_geometry(sensors: Sequence[SensorConfig], image_footprint_m: float, max_footprint_m: float = 1280.0,
                  fine_patch_extent_m: float | None = None, reference_group_id: int | None = None) -> GeometryConfig:
    """Build and validate a geometry, filling in the reference fine group."""
    groups = [g for s in sensors for g in s.groups]
    if not groups:
        raise ValidationError("geometry needs at least one spectral group")
    if reference_group_id is None:
        reference_group_id = _pick_reference(groups).id
    if fine_patch_extent_m is None:
        ref = [g for g in groups if g.id == reference_group_id]
        if not ref:
            raise ValidationError(f"reference group {reference_group_id} not in config")
        fine_patch_extent_m = ref[0].patch_extent_m
    fp = FootprintConfig(float(image_footprint_m), float(max_footprint_m), float(fine_patch_extent_m),
                         int(reference_group_id))
    cfg = GeometryConfig(fp, tuple(sensors))
    validate_config(cfg)
    return cfg


def validate_config(config: GeometryConfig) -> None:
    """Raise unless every geometry invariant holds.  Pure; returns ``None``."""
    fp = config.footprint
    if fp.image_footprint_m <= 0 or fp.max_footprint_m <= 0:
        raise FootprintError("footprints must be positive")
    if fp.image_footprint_m > fp.max_footprint_m * (1 + REL_TOL):
        raise FootprintError(f"image footprint {fp.image_footprint_m} exceeds max {fp.max_footprint_m}")

    sensor_ids = [s.sensor_id for s in config.sensors]
    if len(set(sensor_ids)) != len(sensor_ids):
        raise DuplicateIdError(f"duplicate sensor ids {sensor_ids}")
    names = [s.name for s in config.sensors]
    if len(set(names)) != len(names):
        raise DuplicateIdError(f"duplicate sensor names {names}")

    group_ids = [g.id for s in config.sensors for g in s.groups]
    if len(set(group_ids)) != len(group_ids):
        raise DuplicateIdError(f"duplicate group ids {group_ids}")

    for s in config.sensors:
        bands = s.band_names
        if len(set(bands)) != len(bands):
            raise DuplicateIdError(f"duplicate band names in sensor {s.name}")
        for g in s.groups:
            if g.sensor_id != s.sensor_id:
                raise ValidationError(f"group {g.id} claims sensor {g.sensor_id}, lives in {s.sensor_id}")
            if not g.band_names:
                raise ValidationError(f"group {g.id} has no bands")
            if g.gsd <= 0 or g.patch_count < 1 or g.patch_size < 1:
                raise ValidationError(f"group {g.id}: gsd, patch count and patch size must be positive")

    groups = config.groups
    p_max = max(g.patch_count for g in groups)
    for g in groups:
        if p_max % g.patch_count:
            raise DivisibilityError(f"patch count {g.patch_count} of group {g.id} does not divide {p_max}")
        if not _close(g.patch_count * g.patch_size * g.gsd, fp.image_footprint_m):
            raise CoverageError(
                f"group {g.id}: {g.patch_count}*{g.patch_size}*{g.gsd} != footprint {fp.image_footprint_m}"
            )
        # groups must also nest in the (possibly absent) reference grid
        cells = g.patch_extent_m / fp.fine_patch_extent_m
        if _integral(cells) is None:
            raise DivisibilityError(
                f"group {g.id} patch extent {g.patch_extent_m} m is not a multiple of the "
                f"reference extent {fp.fine_patch_extent_m} m"
            )
    config.reference_patch_count


def sequence_length(config: GeometryConfig, band_subset: Sequence[str], pooled: bool = True) -> int:
    """Tokens produced for ``band_subset``: sum of p^2 over represented groups.

    With ``pooled=False`` every band contributes its own p^2 tokens (the
    no-pooling baseline).
    """
    active = config.active_groups(band_subset)
    if pooled:
        return sum(g.n_patches for g, _ in active)
    return sum(g.n_patches * len(keys) for g, keys in active)


def fine_grid_offset(image_footprint_m: float, max_footprint_m: float, fine_patch_extent_m: float) -> float:
    """Offset, in reference cells, of a concentric image inside the max footprint."""
    if image_footprint_m > max_footprint_m * (1 + REL_TOL):
        raise FootprintError(f"image footprint {image_footprint_m} exceeds max {max_footprint_m}")
    return (max_footprint_m - image_footprint_m) / (2.0 * fine_patch_extent_m)


NAIP_BANDS = ("Red", "Green", "Blue")
S2_10M_BANDS = ("Red", "Green", "Blue", "NIR")
S2_20M_BANDS = ("RedEdge1", "RedEdge2", "RedEdge3", "SWIR1", "SWIR2")


def usatlas_geometry(image_footprint_m: float = 320.0, max_footprint_m: float = 1280.0) -> GeometryConfig:
    """NAIP (1 m, 20x20 patches of 16 px) plus Sentinel-2 10 m (4x4 of 8 px) and 20 m (2x2 of 8 px)."""
    naip = SensorConfig(0, "naip", (SpectralGroup(0, 0, NAIP_BANDS, 1.0, 20, 16),))
    s2 = SensorConfig(1, "sentinel2", (
        SpectralGroup(1, 1, S2_10M_BANDS, 10.0, 4, 8),
        SpectralGroup(2, 1, S2_20M_BANDS, 20.0, 2, 8),
    ))
    geo = make_geometry((naip, s2), image_footprint_m=320.0, max_footprint_m=max_footprint_m)
    if image_footprint_m != 320.0:
        geo = geo.refit(image_footprint_m)
    return geo
