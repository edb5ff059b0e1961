import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import grad_check, mini_model, random_mask, random_patches
from usat.errors import AllVisibleError, ShapeError
from usat.geometry import usatlas_geometry
from usat.encodings import EncodingParams
from usat.model.usat import (PRESETS, DecoderConfig, EncoderConfig, ModelSpec, USatModel, classify,
                             decode_and_reconstruct, embed_fwd, encode, head_name, mae_loss,
                             normalize_tokens)

GOLDEN = Path(__file__).parent / "golden" / "encode_tiny.json"


def _tokens(model, batch=1, seed=0):
    lay = model.layout()
    return embed_fwd(model.params, lay, random_patches(model, batch, seed), model.spec.pool), lay


# ---- encode -----------------------------------------------------------------

def test_encode_matches_golden_vector():
    m = mini_model(seed=7)
    tok, lay = _tokens(m, 1, 7)
    out = encode(m.params, m.spec.encoder, tok, m.encodings(lay), None, visible_only=False)
    ref = np.array(json.loads(GOLDEN.read_text())["values"])
    np.testing.assert_allclose(out[0, :4, :8].ravel(), ref, atol=1e-6)


def test_depth_zero_is_tokens_plus_encodings():
    m = mini_model()
    tok, lay = _tokens(m)
    enc0 = dataclasses.replace(m.spec.encoder, depth=0)
    out = encode(m.params, enc0, tok, m.encodings(lay), visible_only=False)
    np.testing.assert_array_equal(out, tok + m.encodings(lay))


def test_encode_visible_only_drops_masked_tokens():
    m = mini_model()
    tok, lay = _tokens(m, 2)
    mask = random_mask(m, 2, 0.5)
    out = encode(m.params, m.spec.encoder, tok, m.encodings(lay), mask)
    assert out.shape == (2, int((~mask[0]).sum()), 64)


def test_encode_rejects_mismatched_encodings():
    m = mini_model()
    tok, lay = _tokens(m)
    with pytest.raises(ShapeError):
        encode(m.params, m.spec.encoder, tok, m.encodings(lay)[:-1], visible_only=False)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_equivariance(seed):
    m = mini_model()
    tok, lay = _tokens(m, 1, seed % 97)
    encs = m.encodings(lay)
    perm = np.random.default_rng(seed).permutation(tok.shape[1])
    a = encode(m.params, m.spec.encoder, tok, encs, visible_only=False)
    b = encode(m.params, m.spec.encoder, tok[:, perm], encs[perm], visible_only=False)
    np.testing.assert_allclose(b, a[:, perm], atol=1e-10)


def test_forward_is_deterministic():
    m = mini_model()
    p = random_patches(m, 2)
    np.testing.assert_array_equal(m.logits(p), m.logits(p))
    mask = random_mask(m, 2)
    assert m.mae_forward(p, mask)[0] == m.mae_forward(p, mask)[0]


# ---- decoder ----------------------------------------------------------------

def test_all_visible_decoder_still_predicts_every_token():
    m = mini_model()
    tok, lay = _tokens(m, 2)
    mask = np.zeros((2, lay.seq_len), dtype=bool)
    lat = encode(m.params, m.spec.encoder, tok, m.encodings(lay), mask)
    preds = decode_and_reconstruct(m.params, m.decoder, lay, lat, mask, m.encodings(lay, True))
    for p, g in zip(preds, lay.groups):
        assert p.shape == (2, g.patch_count ** 2, len(g.band_names) * g.patch_size ** 2)
        assert np.isfinite(p).all()


def test_decoder_rejects_wrong_latent_count():
    m = mini_model()
    tok, lay = _tokens(m, 1)
    mask = random_mask(m, 1)
    lat = encode(m.params, m.spec.encoder, tok, m.encodings(lay), mask)
    with pytest.raises(ShapeError):
        decode_and_reconstruct(m.params, m.decoder, lay, lat[:, 1:], mask, m.encodings(lay, True))


def test_usatlas_head_dims():
    geo = usatlas_geometry()
    spec = ModelSpec(geo, PRESETS["tiny"], EncodingParams.allocate(64), geo.all_bands(), DecoderConfig(1))
    params = USatModel.create(spec).params
    d_dec = spec.decoder.resolved(spec.encoder).d_dec
    assert d_dec == 32
    assert params[head_name(0) + ".weight"].shape == (d_dec, 768)
    assert params[head_name(1) + ".weight"].shape == (d_dec, 256)
    assert params[head_name(2) + ".weight"].shape == (d_dec, 5 * 64)


def test_decoder_width_defaults_to_half():
    assert DecoderConfig().resolved(PRESETS["vitl"]) == DecoderConfig(8, 512, 16, 4.0)


# ---- mae_loss ---------------------------------------------------------------

def _loss_inputs(seed=0, groups=((2, 5, 6), (2, 3, 4))):
    rng = np.random.default_rng(seed)
    preds = [rng.standard_normal(s) for s in groups]
    targets = [rng.standard_normal(s) for s in groups]
    masks = [rng.random(s[:2]) < 0.5 for s in groups]
    for mk in masks:
        mk[0, 0] = True
    return preds, targets, masks


def test_perfect_prediction_gives_zero():
    _, targets, masks = _loss_inputs()
    assert mae_loss([normalize_tokens(t) for t in targets], targets, masks) == 0.0
    assert mae_loss([t.copy() for t in targets], targets, masks, normalize_target=False) == 0.0


def test_unmasked_prediction_has_no_effect():
    preds, targets, masks = _loss_inputs(3)
    base = mae_loss(preds, targets, masks)
    for g, mk in enumerate(masks):
        b, t = np.argwhere(~mk)[0]
        bumped = [p.copy() for p in preds]
        bumped[g][b, t] += 1e3
        assert mae_loss(bumped, targets, masks) == base


def test_loss_matches_loop_oracle():
    preds, targets, masks = _loss_inputs(5)
    group_losses = []
    for p, t, mk in zip(preds, targets, masks):
        total, n = 0.0, 0
        for b in range(p.shape[0]):
            for i in range(p.shape[1]):
                if not mk[b, i]:
                    continue
                row = t[b, i]
                mu = sum(row) / len(row)
                var = sum((x - mu) ** 2 for x in row) / len(row)
                sq = sum((p[b, i, j] - (row[j] - mu) / (var + 1e-6) ** 0.5) ** 2 for j in range(len(row)))
                total += sq / len(row)
                n += 1
        group_losses.append(total / n)
    assert abs(mae_loss(preds, targets, masks) - sum(group_losses) / len(group_losses)) < 1e-7


def test_three_masked_tokens_oracle():
    rng = np.random.default_rng(11)
    p, t = rng.standard_normal((1, 6, 4)), rng.standard_normal((1, 6, 4))
    mk = np.zeros((1, 6), dtype=bool)
    mk[0, [1, 3, 4]] = True
    tn = (t - t.mean(-1, keepdims=True)) / np.sqrt(t.var(-1, keepdims=True) + 1e-6)
    expect = np.mean([np.mean((p[0, i] - tn[0, i]) ** 2) for i in (1, 3, 4)])
    assert abs(mae_loss([p], [t], [mk]) - expect) < 1e-7


def test_group_without_masked_tokens_is_skipped():
    preds, targets, masks = _loss_inputs(2)
    only_first = mae_loss(preds[:1], targets[:1], masks[:1])
    masks[1][:] = False
    assert mae_loss(preds, targets, masks) == pytest.approx(only_first, abs=1e-15)


def test_all_visible_raises():
    preds, targets, masks = _loss_inputs()
    with pytest.raises(AllVisibleError):
        mae_loss(preds, targets, [np.zeros_like(mk) for mk in masks])


def test_loss_shape_mismatch_raises():
    preds, targets, masks = _loss_inputs()
    with pytest.raises(ShapeError):
        mae_loss([preds[0][..., :-1]], targets[:1], masks[:1])


# ---- classify ---------------------------------------------------------------

def test_zero_classifier_gives_zero_logits():
    m = mini_model()
    m.params["head.weight"][:] = 0
    m.params["head.bias"][:] = 0
    assert not m.logits(random_patches(m, 2)).any()


def test_single_token_pool_is_identity():
    rng = np.random.default_rng(0)
    params = {"head.weight": rng.standard_normal((8, 3)), "head.bias": rng.standard_normal(3)}
    lat = rng.standard_normal((2, 1, 8))
    np.testing.assert_allclose(classify(params, lat), lat[:, 0] @ params["head.weight"] + params["head.bias"])


def test_classify_matches_loop_oracle():
    rng = np.random.default_rng(1)
    W, b = rng.standard_normal((8, 3)), rng.standard_normal(3)
    lat = rng.standard_normal((2, 5, 8))
    got = classify({"head.weight": W, "head.bias": b}, lat)
    for s in range(2):
        for c in range(3):
            pooled = [sum(lat[s, i, j] for i in range(5)) / 5 for j in range(8)]
            want = sum(pooled[j] * W[j, c] for j in range(8)) + b[c]
            assert abs(got[s, c] - want) < 1e-6


def test_classify_rejects_empty():
    with pytest.raises(ShapeError):
        classify({"head.weight": np.zeros((4, 2)), "head.bias": np.zeros(2)}, np.zeros((1, 0, 4)))


# ---- subsets and gradients -------------------------------------------------

SUBSETS = [("fine/A",), ("coarse/D",), ("fine/B", "coarse/C"), ("coarse/C", "coarse/E"),
           ("fine/A", "fine/B", "coarse/C", "coarse/D", "coarse/E")]


@pytest.mark.parametrize("subset", SUBSETS)
def test_band_subset_logits_are_finite(subset):
    m = mini_model()
    p = random_patches(m, 2)
    logits = m.logits({k: p[k] for k in subset}, m.layout(subset))
    assert logits.shape == (2, 3) and np.isfinite(logits).all()


@pytest.mark.parametrize("loss", ["mae", "cls"])
def test_gradients_match_finite_differences(loss):
    m = mini_model(dtype=np.float64, seed=3)
    p = random_patches(m, 2, seed=3)
    if loss == "mae":
        mask = random_mask(m, 2, 0.5, seed=3)
        _, grads = m.mae_loss_and_grads(p, mask)
        fn = lambda: m.mae_forward(p, mask)[0]  # noqa: E731
    else:
        labels = np.array([[1, 0, 1], [0, 1, 0]])
        _, grads = m.cls_loss_and_grads(p, labels)
        fn = lambda: m.cls_loss_and_grads(p, labels)[0]  # noqa: E731
    errors = grad_check(m.params, fn, grads, eps=1e-5, per_block=3)
    bad = {k: v for k, v in errors.items() if not v < 1e-3}
    assert not bad, bad
