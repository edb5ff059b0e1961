"""Checkpoint directories: ``manifest.json`` plus ``params.bin``.

``params.bin`` is every parameter as little-endian float32, concatenated in
manifest order; the manifest's ``params`` table gives name, shape and element
offset.  Optimizer moments, when saved, go to ``optimizer.bin`` with the same
table (first moments, then second moments).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .model.usat import ModelSpec, USatModel

FORMAT = "usat-ckpt/1"
_F32LE = np.dtype("<f4")


def _table(params: dict) -> list[dict]:
    out, offset = [], 0
    for name in sorted(params):
        n = int(params[name].size)
        out.append({"name": name, "shape": list(params[name].shape), "offset": offset, "count": n})
        offset += n
    return out


def _pack(params: dict, table: list[dict]) -> bytes:
    return b"".join(np.ascontiguousarray(params[t["name"]], dtype=_F32LE).tobytes() for t in table)


def _unpack(buf: bytes, table: list[dict], dtype) -> dict:
    flat = np.frombuffer(buf, dtype=_F32LE)
    out = {}
    for t in table:
        a = flat[t["offset"]:t["offset"] + t["count"]]
        out[t["name"]] = a.reshape(t["shape"]).astype(dtype)
    return out


def save_checkpoint(directory, model: USatModel, extra: dict | None = None, optimizer=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = _table(model.params)
    manifest = {
        "format": FORMAT,
        "spec": model.spec.to_dict(),
        "token_order": model.layout().to_list(),
        "params": table,
        "dtype": "float32-le",
    }
    if optimizer is not None:
        manifest["optimizer"] = {"step": optimizer.step, "file": "optimizer.bin", **optimizer.hyper()}
        # parameters that never received a gradient have zero moments
        zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
        with open(directory / "optimizer.bin", "wb") as fh:
            fh.write(_pack({**zeros, **optimizer.m}, table))
            fh.write(_pack({**zeros, **optimizer.v}, table))
    manifest.update(extra or {})
    with open(directory / "params.bin", "wb") as fh:
        fh.write(_pack(model.params, table))
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return directory


def read_checkpoint_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{directory}: no checkpoint manifest")
    with open(path, encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("format") != FORMAT:
        raise ValidationError(f"{directory}: unsupported checkpoint format {m.get('format')!r}")
    return m


def load_checkpoint(directory, dtype=np.float32) -> tuple[USatModel, dict]:
    directory = Path(directory)
    m = read_checkpoint_manifest(directory)
    spec = ModelSpec.from_dict(m["spec"])
    params = _unpack((directory / "params.bin").read_bytes(), m["params"], dtype)
    return USatModel(spec, params), m


def load_optimizer_moments(directory, manifest: dict):
    path = Path(directory) / "optimizer.bin"
    buf = path.read_bytes()
    half = len(buf) // 2
    return _unpack(buf[:half], manifest["params"], np.float32), _unpack(buf[half:], manifest["params"], np.float32)
