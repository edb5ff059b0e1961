"""Single-band raster files and multi-band records.

File layout: the 7-byte magic ``USRAS1\\n``, one UTF-8 JSON header line, then
``rows * cols`` little-endian float32 values in row-major order.

Ground coordinates are meters; ``origin_m = (x, y)`` is the top-left corner,
columns advance along +x and rows along +y.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ShapeError, USatError

MAGIC = b"USRAS1\n"
_F32LE = np.dtype("<f4")


def write_raster(path, pixels: np.ndarray, band: str, gsd: float, origin_m, timestamp: int) -> None:
    a = np.asarray(pixels)
    if a.ndim != 2:
        raise ShapeError(f"raster must be 2-D, got {a.shape}")
    header = {
        "band": band,
        "rows": int(a.shape[0]),
        "cols": int(a.shape[1]),
        "gsd": float(gsd),
        "origin": [float(origin_m[0]), float(origin_m[1])],
        "timestamp": int(timestamp),
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(a, dtype=_F32LE).tobytes())


def read_raster(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise USatError(f"{path}: not a USRAS1 raster")
        header = json.loads(fh.readline().decode("utf-8"))
        n = header["rows"] * header["cols"]
        data = np.frombuffer(fh.read(), dtype=_F32LE)
    if data.size != n:
        raise ShapeError(f"{path}: expected {n} values, found {data.size}")
    return header, data.reshape(header["rows"], header["cols"]).astype(np.float32)


@dataclass
class Annotation:
    """A labelled point ``(x, y)`` or axis-aligned box ``(x0, y0, x1, y1)`` in ground meters."""

    class_name: str
    point: tuple[float, float] | None = None
    box: tuple[float, float, float, float] | None = None

    def to_dict(self) -> dict:
        d = {"class": self.class_name}
        if self.point is not None:
            d["point"] = list(self.point)
        if self.box is not None:
            d["box"] = list(self.box)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation":
        return cls(d["class"], tuple(d["point"]) if "point" in d else None, tuple(d["box"]) if "box" in d else None)


@dataclass
class RasterRecord:
    """One sensor's image of a square footprint: bands keyed by name, each with its own GSD."""

    id: str
    sensor: str
    origin_m: tuple[float, float]
    footprint_m: float
    timestamp: int
    bands: dict[str, np.ndarray] = field(default_factory=dict)
    gsd: dict[str, float] = field(default_factory=dict)
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        if self.footprint_m <= 0:
            raise ShapeError(f"{self.id}: footprint must be positive")
        for name, a in self.bands.items():
            side = self.footprint_m / self.gsd[name]
            if a.shape != (round(side), round(side)):
                raise ShapeError(f"{self.id}/{name}: shape {a.shape} does not match {self.footprint_m} m at {self.gsd[name]} m")

    def contains(self, other: "RasterRecord", tol: float = 1e-6) -> bool:
        ox, oy = self.origin_m
        x, y = other.origin_m
        return (ox - tol <= x and oy - tol <= y
                and x + other.footprint_m <= ox + self.footprint_m + tol
                and y + other.footprint_m <= oy + self.footprint_m + tol)

    def save(self, directory: Path) -> dict:
        """Write band files under ``directory`` and return the manifest entry."""
        directory = Path(directory)
        (directory / "rasters").mkdir(parents=True, exist_ok=True)
        bands = {}
        for name, a in self.bands.items():
            rel = f"rasters/{self.id}_{name}.usr"
            write_raster(directory / rel, a, name, self.gsd[name], self.origin_m, self.timestamp)
            bands[name] = {"file": rel, "gsd": self.gsd[name]}
        return {
            "id": self.id,
            "sensor": self.sensor,
            "origin_m": list(self.origin_m),
            "footprint_m": self.footprint_m,
            "timestamp": self.timestamp,
            "bands": bands,
            "annotations": [a.to_dict() for a in self.annotations],
        }

    @classmethod
    def load(cls, directory: Path, entry: dict) -> "RasterRecord":
        bands, gsd = {}, {}
        for name, b in entry["bands"].items():
            _, a = read_raster(Path(directory) / b["file"])
            bands[name] = a
            gsd[name] = float(b["gsd"])
        return cls(entry["id"], entry["sensor"], tuple(entry["origin_m"]), float(entry["footprint_m"]),
                   int(entry["timestamp"]), bands, gsd, [Annotation.from_dict(a) for a in entry.get("annotations", [])])
