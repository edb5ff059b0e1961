"""Binary netpbm output: 8-bit PGM (P5) and PPM (P6)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ShapeError


def to_uint8(a: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear map of ``[lo, hi]`` onto 0..255 with clipping; flat input maps to 0."""
    a = np.asarray(a, dtype=np.float64)
    lo = float(np.nanmin(a)) if lo is None else lo
    hi = float(np.nanmax(a)) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    return np.clip(np.rint((a - lo) / span * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ShapeError(f"PGM needs a 2-D uint8 array, got {image.dtype} {image.shape}")
    path = Path(path)
    h, w = image.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes())
    return path


def write_ppm(path, image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"PPM needs an [H, W, 3] uint8 array, got {image.dtype} {image.shape}")
    path = Path(path)
    h, w, _ = image.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read a file written by :func:`write_pgm` or :func:`write_ppm`."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ShapeError(f"{path}: not an 8-bit binary PGM/PPM")
    c = 1 if magic == "P5" else 3
    pix = np.frombuffer(data[pos:], dtype=np.uint8)
    if pix.size != w * h * c:
        raise ShapeError(f"{path}: expected {w * h * c} bytes of pixels, found {pix.size}")
    return pix.reshape(h, w) if c == 1 else pix.reshape(h, w, 3)
