"""USat encoder, USatMAE decoder, reconstruction loss and classification head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import encodings as enc
from ..errors import AllVisibleError, ShapeError, UnknownBandError, ValidationError
from ..geometry import GeometryConfig
from ..patch_embed import TokenLayout, init_projection, projection_names
from . import nn

NORM_TARGET_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    d_model: int
    n_heads: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0 or self.d_model < 1 or self.n_heads < 1 or self.mlp_ratio <= 0:
            raise ValidationError("encoder depth/width/heads/mlp_ratio must be positive")
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


PRESETS = {
    "vitl": EncoderConfig(24, 1024, 16, 4.0),
    "tiny": EncoderConfig(2, 64, 4, 4.0),
}


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 8
    d_dec: int | None = None
    n_heads: int | None = None
    mlp_ratio: float = 4.0

    def resolved(self, encoder: EncoderConfig) -> "DecoderConfig":
        d = self.d_dec or encoder.d_model // 2
        h = self.n_heads or encoder.n_heads
        if d % h:
            raise ValidationError(f"decoder width {d} not divisible by {h} heads")
        return DecoderConfig(self.depth, d, h, self.mlp_ratio)


@dataclass(frozen=True)
class ModelSpec:
    """Everything that fixes parameter names and shapes."""

    geometry: GeometryConfig
    encoder: EncoderConfig
    encodings: enc.EncodingParams
    band_keys: tuple[str, ...]
    decoder: DecoderConfig | None = None
    n_classes: int = 0
    pool: str = "average"
    normalize_target: bool = True
    task: str = "multilabel"

    def __post_init__(self):
        if self.encodings.d_model != self.encoder.d_model:
            raise ValidationError("encoding width must equal d_model")
        if self.pool not in ("average", "sum"):
            raise ValidationError(f"unknown pool mode {self.pool!r}")
        if self.task not in ("multilabel", "single"):
            raise ValidationError(f"unknown task {self.task!r}")

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "encoder": asdict(self.encoder),
            "encodings": self.encodings.to_dict(),
            "band_keys": list(self.band_keys),
            "decoder": asdict(self.decoder) if self.decoder is not None else None,
            "n_classes": self.n_classes,
            "pool": self.pool,
            "normalize_target": self.normalize_target,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            geometry=GeometryConfig.from_dict(d["geometry"]),
            encoder=EncoderConfig(**d["encoder"]),
            encodings=enc.EncodingParams(**d["encodings"]),
            band_keys=tuple(d["band_keys"]),
            decoder=DecoderConfig(**d["decoder"]) if d.get("decoder") else None,
            n_classes=int(d.get("n_classes", 0)),
            pool=d.get("pool", "average"),
            normalize_target=bool(d.get("normalize_target", True)),
            task=d.get("task", "multilabel"),
        )


def head_name(group_id: int) -> str:
    return f"decoder.head.{group_id}"


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    d = spec.encoder.d_model
    for key in spec.band_keys:
        g = spec.geometry.band_group(key)
        wn, bn = projection_names(key)
        params[wn], params[bn] = init_projection(rng, g.patch_size, d, dtype)
    nn.init_stack(params, rng, "encoder", spec.encoder.depth, d, spec.encoder.mlp_ratio, dtype)
    if spec.decoder is not None:
        dec = spec.decoder.resolved(spec.encoder)
        nn.init_linear(params, rng, "decoder.embed", d, dec.d_dec, dtype)
        params["decoder.mask_token"] = (0.02 * rng.standard_normal(dec.d_dec)).astype(dtype)
        nn.init_stack(params, rng, "decoder", dec.depth, dec.d_dec, dec.mlp_ratio, dtype)
        for g in spec.geometry.groups:
            nn.init_linear(params, rng, head_name(g.id), dec.d_dec, len(g.band_names) * g.patch_size ** 2, dtype)
    if spec.n_classes:
        nn.init_linear(params, rng, "head", d, spec.n_classes, dtype)
    return params


# ---------------------------------------------------------------------------
# embedding: per-band projection + group pooling
# ---------------------------------------------------------------------------

def embed_fwd(params, layout: TokenLayout, patches: Mapping[str, np.ndarray], pool: str):
    parts = []
    for g, keys in zip(layout.groups, layout.bands):
        acc = None
        for k in keys:
            wn, bn = projection_names(k)
            if wn not in params:
                raise UnknownBandError(f"no projection for band {k!r}")
            e = patches[k] @ params[wn] + params[bn]
            acc = e if acc is None else acc + e
        parts.append(acc / len(keys) if pool == "average" else acc)
    return np.concatenate(parts, axis=1)


def embed_bwd(params, layout: TokenLayout, patches, pool, dtokens, grads):
    for sl, g, keys in zip(layout.slices(), layout.groups, layout.bands):
        dg = dtokens[:, sl]
        if pool == "average":
            dg = dg / len(keys)
        flat = dg.reshape(-1, dg.shape[-1])
        for k in keys:
            wn, bn = projection_names(k)
            P = patches[k].reshape(-1, patches[k].shape[-1])
            nn._acc(grads, wn, P.T @ flat)
            nn._acc(grads, bn, flat.sum(axis=0))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _gather(x, idx):
    return x[np.arange(x.shape[0])[:, None], idx]


def visible_index(mask: np.ndarray) -> np.ndarray:
    """``[B, n_visible]`` token indices; every row must hide the same number."""
    mask = np.asarray(mask, dtype=bool)
    counts = (~mask).sum(axis=1)
    if np.any(counts != counts[0]):
        raise ShapeError("every sample in a batch must have the same number of visible tokens")
    return np.nonzero(~mask)[1].reshape(mask.shape[0], counts[0])


def encode_fwd(params, encoder: EncoderConfig, tokens, encodings, mask=None):
    if tokens.shape[-2:] != encodings.shape:
        raise ShapeError(f"tokens {tokens.shape[-2:]} vs encodings {encodings.shape}")
    x = tokens + encodings.astype(tokens.dtype)
    idx = None
    if mask is not None:
        idx = visible_index(mask)
        x = _gather(x, idx)
    y, c = nn.stack_fwd(params, "encoder", encoder.depth, x, encoder.n_heads)
    return y, (c, idx, tokens.shape)


def encode_bwd(params, encoder: EncoderConfig, dy, cache, grads):
    c, idx, shape = cache
    dx = nn.stack_bwd(params, "encoder", encoder.depth, dy, c, encoder.n_heads, grads)
    if idx is None:
        return dx
    full = np.zeros(shape, dtype=dx.dtype)
    full[np.arange(shape[0])[:, None], idx] = dx
    return full


def encode(params, encoder: EncoderConfig, tokens, encodings, mask=None, visible_only: bool = True):
    """Transformer over ``tokens + encodings``; with ``visible_only`` and a
    mask, only unmasked tokens enter.  Accepts ``[seq, d]`` or ``[B, seq, d]``."""
    single = tokens.ndim == 2
    t = tokens[None] if single else tokens
    m = None
    if visible_only and mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = m[None] if m.ndim == 1 else m
    y, _ = encode_fwd(params, encoder, t, encodings, m)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def decode_fwd(params, decoder: DecoderConfig, layout: TokenLayout, latents, mask, dec_encodings):
    B = latents.shape[0]
    seq = layout.seq_len
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, seq):
        raise ShapeError(f"mask {mask.shape} != {(B, seq)}")
    idx = visible_index(mask)
    if idx.shape[1] != latents.shape[1]:
        raise ShapeError(f"{latents.shape[1]} latents for {idx.shape[1]} visible tokens")
    z, c_embed = nn.linear_fwd(params, "decoder.embed", latents)
    full = np.broadcast_to(params["decoder.mask_token"], (B, seq, z.shape[-1])).copy()
    full[np.arange(B)[:, None], idx] = z
    full = full + dec_encodings.astype(full.dtype)
    h, c_stack = nn.stack_fwd(params, "decoder", decoder.depth, full, decoder.n_heads)
    preds, c_heads = [], []
    for sl, g in zip(layout.slices(), layout.groups):
        p, c = nn.linear_fwd(params, head_name(g.id), h[:, sl])
        preds.append(p)
        c_heads.append(c)
    return preds, (idx, c_embed, c_stack, c_heads, h.shape)


def decode_bwd(params, decoder: DecoderConfig, layout: TokenLayout, dpreds, cache, grads):
    idx, c_embed, c_stack, c_heads, hshape = cache
    dh = np.zeros(hshape, dtype=dpreds[0].dtype)
    for sl, g, dp, c in zip(layout.slices(), layout.groups, dpreds, c_heads):
        dh[:, sl] = nn.linear_bwd(params, head_name(g.id), dp, c, grads)
    dfull = nn.stack_bwd(params, "decoder", decoder.depth, dh, c_stack, decoder.n_heads, grads)
    dz = _gather(dfull, idx)
    nn._acc(grads, "decoder.mask_token", dfull.sum(axis=(0, 1)) - dz.sum(axis=(0, 1)))
    return nn.linear_bwd(params, "decoder.embed", dz, c_embed, grads)


def decode_and_reconstruct(params, decoder: DecoderConfig, layout: TokenLayout, latents, mask, dec_encodings):
    """Per-group pixel predictions ``[B, p^2, k_g * s_g^2]`` for every token."""
    preds, _ = decode_fwd(params, decoder, layout, latents, mask, dec_encodings)
    return preds


# ---------------------------------------------------------------------------
# reconstruction loss
# ---------------------------------------------------------------------------

def normalize_tokens(target):
    mean = target.mean(axis=-1, keepdims=True)
    var = target.var(axis=-1, keepdims=True)
    return (target - mean) / np.sqrt(var + NORM_TARGET_EPS)


def mae_loss_fwd(preds, targets, masks, normalize_target=True):
    """Mean squared error over masked tokens per group, averaged over groups.

    ``preds``/``targets`` are lists of ``[B, n_g, L_g]``; ``masks`` a list of
    ``[B, n_g]`` booleans (True = masked).
    """
    if len(preds) != len(targets) or len(preds) != len(masks):
        raise ShapeError("preds, targets and masks must have one entry per group")
    live = [int(np.asarray(m).sum()) for m in masks]
    n_live = sum(1 for n in live if n)
    if n_live == 0:
        raise AllVisibleError("no token is masked in any group")
    loss = 0.0
    cache = []
    for p, t, m, n in zip(preds, targets, masks, live):
        if p.shape != t.shape:
            raise ShapeError(f"pred {p.shape} vs target {t.shape}")
        if n == 0:
            cache.append(None)
            continue
        tt = normalize_tokens(t) if normalize_target else t
        diff = p - tt
        per_tok = (diff * diff).mean(axis=-1)
        w = np.asarray(m, dtype=p.dtype)
        loss += float((per_tok * w).sum() / n)
        cache.append((diff, w, n))
    return loss / n_live, (cache, n_live)


def mae_loss_bwd(cache):
    per_group, n_live = cache
    out = []
    for c in per_group:
        if c is None:
            out.append(None)
            continue
        diff, w, n = c
        out.append(diff * (2.0 / (diff.shape[-1] * n * n_live)) * w[..., None])
    return out


def mae_loss(preds, targets, masks, normalize_target=True) -> float:
    return mae_loss_fwd(preds, targets, masks, normalize_target)[0]


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def classify_fwd(params, latents):
    if latents.shape[-2] == 0:
        raise ShapeError("no latents to pool")
    pooled = latents.mean(axis=-2)
    logits, c = nn.linear_fwd(params, "head", pooled)
    return logits, (c, latents.shape)


def classify_bwd(params, dlogits, cache, grads):
    c, shape = cache
    dpooled = nn.linear_bwd(params, "head", dlogits, c, grads)
    return np.broadcast_to(dpooled[..., None, :] / shape[-2], shape)


def classify(params, latents):
    """Mean-pool tokens then affine map to class logits."""
    return classify_fwd(params, latents)[0]


def bce_with_logits(logits, labels):
    z = logits.astype(np.float64)
    y = labels.astype(np.float64)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (1.0 / (1.0 + np.exp(-z)) - y) / z.size
    return float(loss.mean()), grad.astype(logits.dtype)


def softmax_cross_entropy(logits, labels):
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


# ---------------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------------

@dataclass
class USatModel:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    _enc_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, spec: ModelSpec, seed: int = 0, dtype=np.float32) -> "USatModel":
        return cls(spec, init_params(spec, seed, dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def decoder(self) -> DecoderConfig:
        if self.spec.decoder is None:
            raise ValidationError("model has no decoder")
        return self.spec.decoder.resolved(self.spec.encoder)

    def layout(self, band_subset: Sequence[str] | None = None) -> TokenLayout:
        return TokenLayout.build(self.spec.geometry, band_subset or self.spec.band_keys)

    def encodings(self, layout: TokenLayout, decoder: bool = False) -> np.ndarray:
        key = (layout.band_keys, decoder, self.spec.encodings.group_index_mode)
        if key not in self._enc_cache:
            p = self.spec.encodings
            if decoder:
                p = p.with_dim(self.decoder.d_dec)
            self._enc_cache[key] = enc.compose(self.spec.geometry, p, layout.band_keys).astype(self.dtype)
        return self._enc_cache[key]

    def targets(self, layout: TokenLayout, patches):
        """Channel-stacked pixel targets per group, only for present bands."""
        out = []
        for g, keys in zip(layout.groups, layout.bands):
            out.append(np.concatenate([patches[k] for k in keys], axis=-1))
        return out

    def _head_columns(self, layout: TokenLayout):
        cols = []
        for g, keys in zip(layout.groups, layout.bands):
            s2 = g.patch_size ** 2
            present = {k.split("/", 1)[1] for k in keys}
            if len(present) == len(g.band_names):
                cols.append(None)
                continue
            idx = [np.arange(j * s2, (j + 1) * s2) for j, b in enumerate(g.band_names) if b in present]
            cols.append(np.concatenate(idx))
        return cols

    # ---- pre-training ---------------------------------------------------
    def mae_forward(self, patches, mask, layout: TokenLayout | None = None):
        layout = layout or self.layout()
        tokens = embed_fwd(self.params, layout, patches, self.spec.pool)
        lat, c_enc = encode_fwd(self.params, self.spec.encoder, tokens, self.encodings(layout), mask)
        preds, c_dec = decode_fwd(self.params, self.decoder, layout, lat, mask, self.encodings(layout, True))
        cols = self._head_columns(layout)
        preds_sel = [p if c is None else p[..., c] for p, c in zip(preds, cols)]
        gmask = [mask[:, sl] for sl in layout.slices()]
        loss, c_loss = mae_loss_fwd(preds_sel, self.targets(layout, patches), gmask, self.spec.normalize_target)
        return loss, preds, (layout, patches, mask, c_enc, c_dec, c_loss, cols, [p.shape for p in preds])

    def mae_backward(self, cache):
        layout, patches, mask, c_enc, c_dec, c_loss, cols, shapes = cache
        grads: dict[str, np.ndarray] = {}
        dsel = mae_loss_bwd(c_loss)
        dpreds = []
        for d, c, shp in zip(dsel, cols, shapes):
            full = np.zeros(shp, dtype=self.dtype)
            if d is not None:
                if c is None:
                    full = d.astype(self.dtype)
                else:
                    full[..., c] = d
            dpreds.append(full)
        dlat = decode_bwd(self.params, self.decoder, layout, dpreds, c_dec, grads)
        dtok = encode_bwd(self.params, self.spec.encoder, dlat, c_enc, grads)
        embed_bwd(self.params, layout, patches, self.spec.pool, dtok, grads)
        return grads

    def mae_loss_and_grads(self, patches, mask, layout=None):
        loss, _, cache = self.mae_forward(patches, mask, layout)
        return loss, self.mae_backward(cache)

    # ---- classification ---------------------------------------------------
    def latents(self, patches, layout: TokenLayout | None = None):
        layout = layout or self.layout()
        tokens = embed_fwd(self.params, layout, patches, self.spec.pool)
        return encode_fwd(self.params, self.spec.encoder, tokens, self.encodings(layout))[0]

    def features(self, patches, layout=None):
        """Mean-pooled encoder output, ``[B, d_model]``."""
        return self.latents(patches, layout).mean(axis=1)

    def logits(self, patches, layout=None):
        return classify(self.params, self.latents(patches, layout))

    def cls_loss_and_grads(self, patches, labels, layout=None):
        layout = layout or self.layout()
        tokens = embed_fwd(self.params, layout, patches, self.spec.pool)
        lat, c_enc = encode_fwd(self.params, self.spec.encoder, tokens, self.encodings(layout))
        logits, c_cls = classify_fwd(self.params, lat)
        if self.spec.task == "multilabel":
            loss, dlogits = bce_with_logits(logits, labels)
        else:
            loss, dlogits = softmax_cross_entropy(logits, labels)
        grads: dict[str, np.ndarray] = {}
        dlat = classify_bwd(self.params, dlogits, c_cls, grads)
        dtok = encode_bwd(self.params, self.spec.encoder, np.ascontiguousarray(dlat), c_enc, grads)
        embed_bwd(self.params, layout, patches, self.spec.pool, dtok, grads)
        return loss, grads
