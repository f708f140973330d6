import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refquery import nn
from refquery import tensor as T
from refquery.decoders import (FrameDecoderConfig, FrameQueryDecoder, MaskHead, MaskPrediction,
                               QueryEmbeddings, QueryLayer, VideoDecoderConfig, VideoQueryDecoder,
                               bilinear_matrix, init_frame_queries, mask_logits, predict_masks,
                               select_and_binarize, upsample)
from refquery.encoder import FusedFeatures, NumericError
from refquery.gradcheck import finite_diff_check


def fused_features(rng, t=2, c=8, shapes=((4, 4), (2, 2)), n_t=3):
    vis = [T.tensor(rng.normal(size=(t, h, w, c))) for h, w in shapes]
    tok = T.tensor(rng.normal(size=(n_t, c)))
    return FusedFeatures(vis, tok, tok.mean(axis=0))


def frame_decoder(seed=0, **kw):
    cfg = dict(num_layers=2, N_f=5, heads=2, C=8)
    cfg.update(kw)
    return FrameQueryDecoder(np.random.default_rng(seed), FrameDecoderConfig(**cfg))


# ----------------------------------------------------------- frame decoder

def test_defaults():
    assert FrameDecoderConfig().num_layers == 9 and FrameDecoderConfig().N_f == 20
    assert VideoDecoderConfig().num_layers == 6 and VideoDecoderConfig().N_v == 20


def test_zero_text_gives_positional_embeddings():
    dec = frame_decoder()
    q = init_frame_queries(T.tensor(np.zeros(8)), dec)
    assert np.array_equal(q.data, dec.query_embed.data)


def test_identical_text_identical_init(rng):
    dec = frame_decoder()
    s = rng.normal(size=8)
    assert np.array_equal(dec.init_queries(T.tensor(s)).data, dec.init_queries(T.tensor(s.copy())).data)


def test_init_shape_20x64():
    dec = FrameQueryDecoder(np.random.default_rng(0), FrameDecoderConfig(C=64))
    assert dec.init_queries(T.tensor(np.ones(64))).shape == (20, 64)


def test_single_frame_shape(rng):
    q = frame_decoder()(fused_features(rng, t=1))
    assert q.shape == (1, 5, 8)


def test_spatial_token_order_does_not_matter(rng):
    f = fused_features(rng, t=2, shapes=((4, 4),))
    perm = rng.permutation(16)
    flat = f.visual[0].data.reshape(2, 1, 16, 8)
    a = FusedFeatures([T.tensor(flat)], f.tokens, f.sentence)
    b = FusedFeatures([T.tensor(flat[:, :, perm])], f.tokens, f.sentence)
    dec = frame_decoder()
    np.testing.assert_allclose(dec(a).data, dec(b).data, atol=1e-6)


def test_duplicated_frame_decodes_identically(rng):
    f = fused_features(rng, t=1)
    dup = FusedFeatures([T.tensor(np.concatenate([v.data, v.data])) for v in f.visual], f.tokens, f.sentence)
    q = frame_decoder()(dup).data
    assert q[0].tobytes() == q[1].tobytes()
    single = frame_decoder()(f).data
    assert single[0].tobytes() == q[0].tobytes()


def test_frames_are_decoded_independently(rng):
    f = fused_features(rng, t=3)
    dec = frame_decoder()
    base = dec(f).data
    changed = [v.data.copy() for v in f.visual]
    for v in changed:
        v[1] = rng.normal(size=v[1].shape)
    out = dec(FusedFeatures([T.tensor(v) for v in changed], f.tokens, f.sentence)).data
    assert base[0].tobytes() == out[0].tobytes() and base[2].tobytes() == out[2].tobytes()
    assert not np.array_equal(base[1], out[1])


def test_text_changes_frame_queries(rng):
    f = fused_features(rng)
    dec = frame_decoder()
    zero = FusedFeatures(f.visual, T.tensor(np.zeros((3, 8))), T.tensor(np.zeros(8)))
    assert not np.allclose(dec(f).data, dec(zero).data)


def test_non_finite_reports_frame_and_layer(rng):
    f = fused_features(rng, t=3)
    bad = [v.data.copy() for v in f.visual]
    bad[0][2, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="frame 2, layer 0"):
        frame_decoder()(FusedFeatures([T.tensor(v) for v in bad], f.tokens, f.sentence))


def test_decoder_config_checks():
    with pytest.raises(nn.ConfigError):
        FrameDecoderConfig(N_f=0).check()
    with pytest.raises(nn.ConfigError):
        VideoDecoderConfig(num_layers=0).check()
    with pytest.raises(nn.ConfigError):
        VideoDecoderConfig(C=10, heads=4).check()


def test_gradient_through_one_decoder_layer(float64):
    rng = np.random.default_rng(5)
    layer = QueryLayer(rng, 8, 2, 4)
    q = nn.param(rng.normal(size=(2, 4, 8)))
    text = nn.param(rng.normal(size=(3, 8)))
    mem = nn.param(rng.normal(size=(2, 10, 8)))
    w = rng.normal(size=(2, 4, 8))
    params = {"q": q, "text": text, "memory": mem, **dict(layer.named_parameters())}
    rep = finite_diff_check(lambda: (layer(q, text, mem) * T.tensor(w)).sum(), params,
                            tol=1e-3, max_coords=6)
    assert rep.passed, rep.failures()


# ----------------------------------------------------------- video decoder

def video_decoder(seed=0, **kw):
    cfg = dict(num_layers=2, N_v=5, heads=2, C=8)
    cfg.update(kw)
    return VideoQueryDecoder(np.random.default_rng(seed), VideoDecoderConfig(**cfg))


def test_zero_output_projections_keep_initial_video_queries(rng):
    dec = video_decoder()
    nn.zero_output_projections(dec)
    init = T.tensor(rng.normal(size=(5, 8)))
    out = dec(init, T.tensor(rng.normal(size=(3, 5, 8))), T.tensor(rng.normal(size=(4, 8))))
    assert np.array_equal(out.data, init.data)


def test_single_frame_self_consistent_shapes(rng):
    init = T.tensor(rng.normal(size=(5, 8)))
    out = video_decoder()(init, init.reshape(1, 5, 8), T.tensor(rng.normal(size=(4, 8))))
    assert out.shape == (5, 8) and np.isfinite(out.data).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_frame_query_key_order_is_irrelevant(seed):
    rng = np.random.default_rng(seed)
    dec = video_decoder()
    init = T.tensor(rng.normal(size=(5, 8)))
    fq = rng.normal(size=(3, 5, 8))
    text = T.tensor(rng.normal(size=(4, 8)))
    perm = rng.permutation(15)
    shuffled = fq.reshape(15, 8)[perm].reshape(3, 5, 8)
    a = dec(init, T.tensor(fq), text).data
    b = dec(init, T.tensor(shuffled), text).data
    np.testing.assert_allclose(a, b, atol=1e-6)


# ------------------------------------------------------------------- heads

def test_zero_embedding_gives_half(rng):
    f = fused_features(rng)
    emb = QueryEmbeddings(T.tensor(np.zeros((2, 8))), T.tensor(np.zeros((2, 8))), T.tensor(np.zeros(2)))
    pred = predict_masks(emb, f)
    assert pred.soft_masks.shape == (2, 2, 4, 4)
    assert np.all(pred.soft_masks == 0.5)


def test_constant_map_gives_constant_mask(rng):
    c = rng.normal(size=8)
    e = rng.normal(size=(1, 8))
    feats = T.tensor(np.broadcast_to(c, (2, 3, 3, 8)).copy())
    logits = mask_logits(T.tensor(e), feats).data
    want = 1 / (1 + np.exp(-(e @ c)))
    np.testing.assert_allclose(MaskPrediction(logits, np.zeros(1)).soft_masks, want[0], rtol=1e-6)


def test_mask_logits_match_einsum_oracle(rng):
    e = rng.normal(size=(3, 8))
    feats = rng.normal(size=(2, 4, 5, 8))
    got = mask_logits(T.tensor(e), T.tensor(feats)).data
    np.testing.assert_allclose(got, np.einsum("nc,thwc->nthw", e, feats), rtol=1e-5, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_logits_are_linear_in_embedding(seed, alpha):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(3, 8))
    feats = T.tensor(rng.normal(size=(2, 4, 4, 8)))
    a = mask_logits(T.tensor(e), feats).data.astype(np.float64)
    b = mask_logits(T.tensor(e * alpha), feats).data.astype(np.float64)
    np.testing.assert_allclose(b, alpha * a, rtol=1e-5, atol=1e-5 * np.abs(alpha * a).max())


def test_mask_head_shapes(rng):
    head = MaskHead(rng, 8)
    out = head(T.tensor(rng.normal(size=(2, 5, 8))))
    assert out.mask_embed.shape == (2, 5, 8) and out.score_logits.shape == (2, 5)


# ---------------------------------------------------------- select / resize

def test_bilinear_matrix_rows_are_convex():
    m = bilinear_matrix(13, 4)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert (m >= 0).all()
    assert np.allclose(bilinear_matrix(4, 4), np.eye(4))


def test_upsample_constant_and_tensor_agree(rng):
    x = rng.normal(size=(2, 3, 4))
    up_np = upsample(x, (9, 7))
    up_t = upsample(T.tensor(x), (9, 7)).data
    np.testing.assert_allclose(up_np, up_t, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(upsample(np.full((1, 4, 4), 2.5), (16, 16)), 2.5)


def test_argmax_fallback_when_no_score_passes():
    masks = np.zeros((3, 1, 4, 4))
    masks[0, 0, :2] = 1
    masks[1, 0, 2:] = 1
    masks[2, 0, :, :1] = 1
    pred = MaskPrediction.from_probabilities(masks, [0.1, 0.4, 0.2])
    out = select_and_binarize(pred, (4, 4))
    assert np.array_equal(out[0], masks[1, 0].astype(np.uint8))


def test_full_soft_mask_gives_full_frame():
    pred = MaskPrediction.from_probabilities(np.ones((1, 2, 4, 4)), [0.9])
    assert select_and_binarize(pred, (16, 12)).sum() == 2 * 16 * 12


def test_union_of_disjoint_selected_masks():
    masks = np.zeros((2, 1, 8, 8))
    masks[0, 0, :3, :3] = 1
    masks[1, 0, 5:, 4:] = 1
    pred = MaskPrediction.from_probabilities(masks, [0.9, 0.8])
    out = select_and_binarize(pred, (8, 8))
    assert out.sum() == masks[0].sum() + masks[1].sum()
