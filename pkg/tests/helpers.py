"""Shared test fixtures: a small two-sensor geometry and a finite-difference checker."""
import numpy as np

from usat.encodings import EncodingParams
from usat.geometry import SensorConfig, SpectralGroup, make_geometry
from usat.masking import MaskPlan, batch_masks
from usat.model.usat import PRESETS, DecoderConfig, ModelSpec, USatModel
from usat.patch_embed import patchify


def mini_geometry():
    """16 m footprint: fine sensor 4x4 patches of 4 px at 1 m, coarse sensor 2x2 of 2 px at 4 m."""
    fine = SensorConfig(0, "fine", (SpectralGroup(0, 0, ("A", "B"), 1.0, 4, 4),))
    coarse = SensorConfig(1, "coarse", (SpectralGroup(1, 1, ("C", "D", "E"), 4.0, 2, 2),))
    return make_geometry([fine, coarse], 16.0, max_footprint_m=32.0)


def mini_model(dtype=np.float64, seed=0, n_classes=3, decoder_depth=2, sensor=True):
    geo = mini_geometry()
    spec = ModelSpec(geo, PRESETS["tiny"], EncodingParams.allocate(64, group=True, sensor=sensor),
                     geo.all_bands(), DecoderConfig(decoder_depth), n_classes=n_classes)
    model = USatModel.create(spec, seed=seed, dtype=dtype)
    # non-trivial norms, biases and classifier so every path carries signal
    rng = np.random.default_rng(seed + 1)
    for k, v in model.params.items():
        if k.endswith(".bias") or "norm" in k or k.startswith("head"):
            model.params[k] = (v + 0.1 * rng.standard_normal(v.shape)).astype(dtype)
    return model


def random_patches(model, batch=2, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    layout = model.layout()
    out = {}
    for g, keys in zip(layout.groups, layout.bands):
        for k in keys:
            out[k] = patchify(rng.standard_normal((batch, g.side, g.side)), g.patch_count, g.patch_size).astype(dtype)
    return out


def random_mask(model, batch=2, ratio=0.5, seed=0):
    return batch_masks(MaskPlan.build(model.layout().groups, ratio, seed), range(batch))


def grad_check(params, loss_fn, analytic, eps=1e-5, per_block=5, seed=0):
    """Central differences on up to ``per_block`` entries of every parameter.

    Returns ``{name: relative_error}``.  Blocks with no analytic gradient are
    compared against zero (absolute error).
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(per_block, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            num[j] = (up - down) / (2 * eps)
        if name in analytic:
            ana = analytic[name].reshape(-1)[idx]
            scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8)
            errors[name] = float(np.linalg.norm(ana - num) / scale)
        else:
            errors[name] = float(np.abs(num).max())
    return errors
