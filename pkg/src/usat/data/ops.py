"""Resampling, cropping, pairing and annotation-to-label conversion."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import kernels
from ..errors import AlignmentError, OutOfBoundsError, ShapeError, UnknownClassError
from .raster import Annotation, RasterRecord

_TOL = 1e-6


def _whole(x: float) -> int | None:
    r = round(x)
    return int(r) if abs(x - r) <= _TOL * max(1.0, abs(x)) else None


def bilinear_resample(band: np.ndarray, src_gsd: float, dst_gsd: float) -> np.ndarray:
    """Resample a square band between GSDs.

    Output pixel ``(r, c)`` samples the input at ``((r+0.5)k-0.5, (c+0.5)k-0.5)``
    with ``k = dst_gsd / src_gsd``, clamping at the edges.
    """
    a = np.asarray(band)
    if a.ndim != 2:
        raise ShapeError(f"band must be 2-D, got {a.shape}")
    k = dst_gsd / src_gsd
    rows = _whole(a.shape[0] / k)
    cols = _whole(a.shape[1] / k)
    if rows is None or cols is None or rows < 1 or cols < 1:
        raise ShapeError(f"{a.shape} at {src_gsd} m does not give whole pixels at {dst_gsd} m")
    if rows == a.shape[0] and cols == a.shape[1]:
        return a.astype(np.float64)
    return kernels.bilinear(np.ascontiguousarray(a, dtype=np.float64), rows, cols, float(k))


def crop_to(record: RasterRecord, target_origin, target_footprint: float) -> RasterRecord:
    """Copy the pixel window covering the target square from every band."""
    tx, ty = float(target_origin[0]), float(target_origin[1])
    ox, oy = record.origin_m
    if (tx < ox - _TOL or ty < oy - _TOL or tx + target_footprint > ox + record.footprint_m + _TOL
            or ty + target_footprint > oy + record.footprint_m + _TOL):
        raise OutOfBoundsError(f"{record.id}: target square is not inside the record footprint")
    bands = {}
    for name, a in record.bands.items():
        gsd = record.gsd[name]
        c0 = _whole((tx - ox) / gsd)
        r0 = _whole((ty - oy) / gsd)
        n = _whole(target_footprint / gsd)
        if c0 is None or r0 is None or n is None:
            raise AlignmentError(f"{record.id}/{name}: crop does not land on {gsd} m pixel edges")
        bands[name] = a[r0:r0 + n, c0:c0 + n].copy()
    return RasterRecord(record.id, record.sensor, (tx, ty), float(target_footprint), record.timestamp,
                        bands, dict(record.gsd), list(record.annotations))


def pair_images(fine_records: Sequence[RasterRecord], coarse_records: Sequence[RasterRecord]):
    """Pair each fine record with the containing coarse record closest in time.

    Ties on ``|dt|`` go to the earlier coarse timestamp, then the smaller id.
    Fine records without a containing coarse record are dropped.
    """
    pairs = []
    for f in fine_records:
        best = None
        for c in coarse_records:
            if not c.contains(f):
                continue
            key = (abs(c.timestamp - f.timestamp), c.timestamp, c.id)
            if best is None or key < best[0]:
                best = (key, c)
        if best is not None:
            pairs.append((f, best[1]))
    return pairs


def _intersects(a: Annotation, origin, footprint: float) -> bool:
    x0, y0 = origin
    x1, y1 = x0 + footprint, y0 + footprint
    if a.point is not None:
        px, py = a.point
        return x0 <= px < x1 and y0 <= py < y1
    if a.box is not None:
        # closed box against the half-open footprint, so a zero-size box behaves like a point
        bx0, by0, bx1, by1 = a.box
        return bx0 < x1 and bx1 >= x0 and by0 < y1 and by1 >= y0
    return False


def to_multilabel(annotations: Sequence[Annotation], origin, footprint: float, class_list: Sequence[str]) -> np.ndarray:
    """Class ``c`` is positive iff any annotation of ``c`` intersects the footprint."""
    index = {c: i for i, c in enumerate(class_list)}
    out = np.zeros(len(class_list), dtype=np.int8)
    for a in annotations:
        if a.class_name not in index:
            raise UnknownClassError(f"unknown class {a.class_name!r}")
        if _intersects(a, origin, footprint):
            out[index[a.class_name]] = 1
    return out


def flip_sample(bands: dict, horizontal: bool, vertical: bool) -> dict:
    """Flip every band identically; spatial alignment across GSDs is preserved."""
    out = {}
    for k, a in bands.items():
        if horizontal:
            a = a[:, ::-1]
        if vertical:
            a = a[::-1, :]
        out[k] = np.ascontiguousarray(a)
    return out
