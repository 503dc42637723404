import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emodyn import tensor as T
from emodyn.corpus import CLS_ID, SEP_ID, PackedSequence, pack_ids
from emodyn.encoder import Encoder, EncoderConfig, trunc_normal
from emodyn.tensor import ContractError, Tensor


def make(seed=0, scale=None, **kw):
    cfg = EncoderConfig(**{"vocab_size": 20, "d_model": 8, "n_heads": 2, "n_layers": 2, "d_hidden": 16, "max_len": 32, **kw})
    enc = Encoder(cfg, np.random.default_rng(seed))
    if scale is not None:
        # larger random weights so gradient checks see curvature, not a near-linear map
        rng = np.random.default_rng(seed + 100)
        for p in enc.params.values():
            p.data = p.data + rng.uniform(-scale, scale, p.shape)
    return enc


def seq(tokens, segments=None):
    segments = segments or [0] * len(tokens)
    return PackedSequence(tuple(tokens), tuple(segments), len(tokens), ("", 0, "none"))


def weighted_sum(x, seed=0):
    w = Tensor(np.random.default_rng(seed).uniform(-1, 1, x.shape))
    return T.sum_all(T.hadamard(x, w))


def test_trunc_normal_bounds():
    x = trunc_normal(np.random.default_rng(0), (2000,), std=0.02)
    assert np.abs(x).max() <= 0.04
    assert 0.012 < x.std() < 0.02


def test_config_validation():
    with pytest.raises(ContractError):
        EncoderConfig(d_model=10, n_heads=3)
    with pytest.raises(ContractError):
        EncoderConfig(activation="swish")


# ---------------------------------------------------------------- embeddings


def test_zero_tables_give_beta():
    enc = make()
    for k in ("tok_emb", "pos_emb", "seg_emb"):
        enc.params[k].data = np.zeros(enc.params[k].shape)
    beta = np.arange(8.0)
    enc.params["emb_ln.beta"].data = beta
    out = enc.embed(seq([CLS_ID, 5, 6, SEP_ID])).data
    np.testing.assert_array_equal(out, np.tile(beta, (4, 1)))


def test_embedding_sees_position_and_segment():
    enc = make()
    a = enc.embed(seq([CLS_ID, 5, 6, SEP_ID])).data
    b = enc.embed(seq([CLS_ID, 6, 5, SEP_ID])).data
    assert not np.allclose(a[1], b[2])  # same token, different position
    c = enc.embed(seq([CLS_ID, 5, 6, SEP_ID], [0, 0, 1, 1])).data
    assert not np.allclose(a[2], c[2])


def test_sequence_longer_than_max_len():
    with pytest.raises(ContractError, match="max_len"):
        make(max_len=4).embed(seq([CLS_ID, 5, 6, 7, SEP_ID]))


# ---------------------------------------------------------------- attention


def test_single_position_attention_is_value_path():
    enc = make(scale=0.5)
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 8)))
    lp = enc.layer(0)
    expected = x.data @ lp["w_v"].data @ lp["w_o"].data
    np.testing.assert_allclose(enc.attention(x, 0, 1).data, expected, atol=1e-12)


def test_attention_matches_numpy_reference():
    enc = make(scale=0.5, n_heads=2)
    x = np.random.default_rng(2).uniform(-1, 1, (5, 8))
    out, weights = enc.attention(Tensor(x), 0, 4, return_weights=True)
    lp = {k: v.data for k, v in enc.layer(0).items()}
    dk = 4
    heads = []
    for h in range(2):
        sl = slice(h * dk, (h + 1) * dk)
        q, k, v = (x @ lp["w_q"])[:, sl], (x @ lp["w_k"])[:, sl], (x @ lp["w_v"])[:, sl]
        s = q @ k.T / math.sqrt(dk)
        s[:, 4:] = -np.inf
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(weights.data[h], a, atol=1e-12)
        heads.append(a @ v)
    np.testing.assert_allclose(out.data, np.concatenate(heads, axis=1) @ lp["w_o"], atol=1e-12)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.abs(weights.data[:, :, 4]).max() == 0.0


def test_score_scale_with_duplicated_inputs():
    """Duplicating the head width doubles q.k; the 1/sqrt(d_k) scale turns that into a factor sqrt(2)."""
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (3, 2))
    wq, wk = rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, (2, 2))

    def log_weight_gaps(d, xs, q, k):
        enc = make(d_model=d, n_heads=1, n_layers=1, d_hidden=4)
        lp = enc.layer(0)
        lp["w_q"].data, lp["w_k"].data = q, k
        _, w = enc.attention(Tensor(xs), 0, 3, return_weights=True)
        lw = np.log(w.data[0])
        return lw - lw[:, :1]  # softmax logits up to a per-row constant

    small = log_weight_gaps(2, x, wq, wk)
    z = np.zeros((2, 2))
    big = log_weight_gaps(4, np.hstack([x, x]) / math.sqrt(2), np.block([[wq, z], [z, wq]]), np.block([[wk, z], [z, wk]]))
    # inputs divided by sqrt(2) so raw q.k is unchanged; only the scale differs: 1/2 vs 1/sqrt(2)
    np.testing.assert_allclose(big, small / math.sqrt(2), atol=1e-12)


def test_head_count_consistency():
    one = make(n_heads=1)
    many = make(n_heads=8)
    s = seq([CLS_ID, 5, 6, SEP_ID])
    assert one.encode(s).shape == many.encode(s).shape == (4, 8)


def test_all_pad_attention_rejected():
    enc = make()
    with pytest.raises(ContractError):
        enc.attention(Tensor(np.zeros((2, 8))), 0, 0)


# ---------------------------------------------------------------- blocks


def test_zero_weight_block_is_double_layer_norm():
    enc = make()
    for k, p in enc.layer(0).items():
        if k.startswith(("w_", "b_")):
            p.data = np.zeros(p.shape)
    x = np.random.default_rng(4).uniform(-1, 1, (4, 8))
    g, b = Tensor(np.ones(8)), Tensor(np.zeros(8))
    expected = T.layer_norm(T.layer_norm(Tensor(x), g, b), g, b).data
    np.testing.assert_allclose(enc.block(Tensor(x), 0, 4).data, expected, atol=1e-12)


def test_feed_forward_shape_any_length():
    enc = make()
    for n in (1, 3, 9):
        assert enc.feed_forward(Tensor(np.ones((n, 8))), 0).shape == (n, 8)


@pytest.mark.parametrize("activation", ["relu", "gelu"])
def test_sublayer_gradients(activation):
    enc = make(scale=0.5, activation=activation)
    x = Tensor(np.random.default_rng(5).uniform(-1, 1, (4, 8)), requires_grad=True, name="x")
    lp = enc.layer(0)
    params = [x] + [enc.params["layers.0." + k] for k in lp]
    errs = T.check_gradients(lambda: weighted_sum(enc.block(x, 0, 3)), params)
    assert max(errs.values()) < 1e-4, errs


def test_end_to_end_encoder_gradient_six_tokens():
    enc = make(scale=0.3)
    s = pack_ids([5, 6], [7], 32)
    assert len(s) == 6
    errs = T.check_gradients(lambda: weighted_sum(enc.encode(s)), enc.params.values())
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


# ---------------------------------------------------------------- full passes


def test_encode_cls_requires_cls():
    enc = make()
    with pytest.raises(ContractError):
        enc.encode_cls(seq([5, 6, SEP_ID]))
    assert enc.encode_cls(seq([CLS_ID, 5, SEP_ID])).shape == (8,)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(4, 19), min_size=1, max_size=10), st.integers(1, 10), st.integers(0, 3))
def test_pad_invariance(tokens, n_pad, seed):
    enc = make(seed=seed, scale=0.3)
    s = pack_ids(tokens, [], 32)
    base = enc.encode(s).data
    padded = enc.encode(s.padded(min(len(s) + n_pad, 32))).data
    assert np.abs(padded[: len(s)] - base).max() < 1e-9


def test_backbone_single_feature_and_masking():
    cfg = EncoderConfig(d_model=8, n_heads=2, n_layers=2, d_hidden=16, max_len=6)
    bb = Encoder(cfg, np.random.default_rng(6), token_embeddings=False)
    rng = np.random.default_rng(7)
    feats = [Tensor(rng.uniform(-1, 1, 8)) for _ in range(3)]
    out = bb.backbone_encode(feats).data
    assert out.shape == (8,)
    np.testing.assert_array_equal(bb.backbone_encode(feats).data, out)
    for n_pad in (1, 3):
        assert np.abs(bb.backbone_encode(feats, n_pad=n_pad).data - out).max() < 1e-9
    solo = bb.backbone_encode(feats[:1]).data
    np.testing.assert_array_equal(bb.backbone_encode([Tensor(feats[0].data.copy())]).data, solo)
    with pytest.raises(ContractError):
        bb.backbone_encode([])
    with pytest.raises(ContractError):
        bb.backbone_encode(feats, n_pad=4)
    with pytest.raises(ContractError):
        bb.embed(seq([CLS_ID]))


def test_backbone_reads_last_position():
    cfg = EncoderConfig(d_model=8, n_heads=2, n_layers=1, d_hidden=16, max_len=4)
    bb = Encoder(cfg, np.random.default_rng(8), token_embeddings=False)
    rng = np.random.default_rng(9)
    feats = [Tensor(rng.uniform(-1, 1, 8)) for _ in range(3)]
    x = T.add(T.stack_rows(feats), T.embedding(bb.params["pos_emb"], range(3)))
    x = T.layer_norm(x, bb.params["emb_ln.gamma"], bb.params["emb_ln.beta"], cfg.ln_eps)
    full = bb.block(x, 0, 3).data
    np.testing.assert_allclose(bb.backbone_encode(feats).data, full[2], atol=1e-12)
