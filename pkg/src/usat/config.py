"""JSON run configuration for the command line.

The document has five sections, ``geometry``, ``encodings``, ``model``,
``run`` and ``data``.  Every key is optional; missing keys take the defaults
below.  Unknown keys anywhere are rejected before any work starts.  The CLI
layers command-line flags over the file, so the precedence is
flags > file > defaults.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encodings import EncodingParams
from .errors import ValidationError
from .geometry import GeometryConfig, usatlas_geometry
from .model.usat import PRESETS, DecoderConfig, ModelSpec
from .training import RunConfig

DEFAULTS: dict = {
    "geometry": {
        # either the USatlas layout at these footprints, or a full ``spec`` dict
        "image_footprint_m": 320.0,
        "max_footprint_m": 1280.0,
        "spec": None,
    },
    "encodings": {
        "omega": 10000.0,
        "superpositional": True,
        "group": True,
        "sensor": False,
        "group_index_mode": "pretrain",
    },
    "model": {
        "preset": "vitl",
        "decoder_depth": 8,
        "d_dec": None,
        "decoder_heads": None,
        "pool": "average",
        "normalize_target": True,
        "task": "multilabel",
    },
    "run": {
        "bands": None,
        "sensors": None,
        "mask_ratio": 0.75,
        "batch_size": 160,
        "seed": 0,
        "epochs": None,
        "warmup_epochs": None,
        "base_lr": None,
        "weight_decay": None,
        "flips": True,
        "clip_norm": 1.0,
        "group_index_mode": "finetune",
        "linear_probe": False,
        "select_metric": None,
        "train_split": "train",
        "eval_split": "val",
    },
    "data": {
        "n_samples": 64,
        "n_classes": 6,
        "max_classes_per_scene": 3,
        "smoothness_m": 24.0,
        "sharpness": 4.0,
        "noise": 0.01,
        "val_fraction": 0.25,
        "workers": 1,
    },
}

# mode-specific values used where the run section leaves ``None``
MODE_DEFAULTS = {
    "pretrain": {"epochs": 25, "warmup_epochs": 1, "base_lr": 1.5e-4, "weight_decay": 0.05, "betas": (0.9, 0.95)},
    "finetune": {"epochs": 5, "warmup_epochs": 1, "base_lr": 1e-3, "weight_decay": 0.1, "betas": (0.9, 0.999)},
}


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ValidationError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class CliConfig:
    doc: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "CliConfig":
        """Defaults, then the file at ``path``, then ``overrides`` (same shape)."""
        doc = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ValidationError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ValidationError("config must be a JSON object")
            doc = _merge(doc, raw, "")
        if overrides:
            doc = _merge(doc, overrides, "")
        cfg = cls(doc)
        cfg.validate()
        return cfg

    def __getitem__(self, section: str) -> dict:
        return self.doc[section]

    def validate(self) -> None:
        self.geometry()
        self.encodings()
        m = self["model"]
        if m["preset"] not in PRESETS:
            raise ValidationError(f"unknown preset {m['preset']!r}; choose from {sorted(PRESETS)}")
        run = self.run_config("pretrain")
        self.run_config("finetune")
        self.geometry().resolve_bands(run.bands, run.sensors)
        if int(self["data"]["n_samples"]) < 1:
            raise ValidationError("data.n_samples must be >= 1")

    def geometry(self) -> GeometryConfig:
        g = self["geometry"]
        if g["spec"] is not None:
            return GeometryConfig.from_dict(g["spec"])
        return usatlas_geometry(float(g["image_footprint_m"]), float(g["max_footprint_m"]))

    def encodings(self) -> EncodingParams:
        e = self["encodings"]
        d = PRESETS[self["model"]["preset"]].d_model if self["model"]["preset"] in PRESETS else 1024
        return EncodingParams.allocate(d, group=bool(e["group"]), sensor=bool(e["sensor"]), omega=float(e["omega"]),
                                       superpositional=bool(e["superpositional"]),
                                       group_index_mode=e["group_index_mode"])

    def model_spec(self, geometry: GeometryConfig | None = None, n_classes: int = 0) -> ModelSpec:
        m = self["model"]
        geometry = geometry or self.geometry()
        run = self.run_config("pretrain")
        dec = DecoderConfig(int(m["decoder_depth"]), m["d_dec"], m["decoder_heads"])
        return ModelSpec(geometry, PRESETS[m["preset"]], self.encodings(),
                         geometry.resolve_bands(run.bands, run.sensors), dec, n_classes, m["pool"],
                         bool(m["normalize_target"]), m["task"])

    def run_config(self, mode: str) -> RunConfig:
        r = dict(self["run"])
        base = dict(MODE_DEFAULTS[mode])
        for k in ("epochs", "warmup_epochs", "base_lr", "weight_decay"):
            if r[k] is None:
                r[k] = base[k]
        r["betas"] = base["betas"]
        r["bands"] = tuple(r["bands"]) if r["bands"] else None
        r["sensors"] = tuple(r["sensors"]) if r["sensors"] else None
        if mode == "finetune":
            r.pop("mask_ratio")
        elif not 0.0 < float(r["mask_ratio"]) < 1.0:
            raise ValidationError(f"mask_ratio {r['mask_ratio']} must lie in (0, 1)")
        return RunConfig(mode=mode, **r)

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=1, sort_keys=True)


def schema_text() -> str:
    """Default document, printed on usage errors as the schema reference."""
    return json.dumps(DEFAULTS, indent=1, sort_keys=True)
