import numpy as np
import pytest

from colo import model as M
from colo import tensor as T
from colo import tokens as tok
from colo.corpus import EncodedExample
from colo.rng import derive_rng
from colo.tensor import Tape, Tensor, backward


@pytest.fixture(scope="module")
def tiny_cfg():
    return M.ModelConfig(
        vocab_size=32,
        d_model=16,
        n_heads=2,
        n_enc_layers=1,
        n_dec_layers=1,
        d_ff=24,
        max_src_len=12,
        max_tgt_len=16,
        dropout_rate=0.0,
        proj_hidden=12,
    )


@pytest.fixture(scope="module")
def tiny_params(tiny_cfg):
    return M.init_params(tiny_cfg, seed=1)


def ids(*xs):
    return np.array(xs, dtype=np.int32)


# ---------------------------------------------------------------------------
# init


def test_init_deterministic(tiny_cfg):
    a = M.init_params(tiny_cfg, seed=5)
    b = M.init_params(tiny_cfg, seed=5)
    for name in a.names():
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_init_different_seed_differs(tiny_cfg):
    a = M.init_params(tiny_cfg, seed=5)
    b = M.init_params(tiny_cfg, seed=6)
    assert a["emb.tok"].data.tobytes() != b["emb.tok"].data.tobytes()


def test_param_count_matches_formula():
    cfg = M.ModelConfig(vocab_size=256)
    params = M.init_params(cfg, seed=0)
    d, dff, ph, v = 64, 256, 128, 256
    attn = 4 * d * d + 3 * d  # q/v/o biases only; a key bias cancels in softmax
    ffn = d * dff + dff + dff * d + d
    ln = 2 * d
    enc_layer = attn + ffn + 2 * ln
    dec_layer = 2 * attn + ffn + 3 * ln
    expected = (
        v * d
        + 48 * d
        + 161 * d
        + 2 * enc_layer
        + 2 * dec_layer
        + 2 * ln
        + 2 * (d * ph + ph + ph * d + d)
    )
    assert M.expected_param_count(cfg) == expected
    assert params.n_values() == expected


def test_biases_zero_gains_one(tiny_params):
    for name, t in tiny_params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b"):
            assert np.all(t.data == 0.0), name
        if leaf == "g":
            assert np.all(t.data == 1.0), name


# ---------------------------------------------------------------------------
# encoder


def test_encode_shape(tiny_params, tiny_cfg):
    out = M.encode(tiny_params, tiny_cfg, ids(4, 5, 6))
    assert out.shape == (3, tiny_cfg.d_model)


def test_encode_overlong_raises(tiny_params, tiny_cfg):
    with pytest.raises(M.LengthError):
        M.encode(tiny_params, tiny_cfg, np.arange(20, dtype=np.int32) % 8)


def test_encode_deterministic_without_dropout(tiny_params, tiny_cfg):
    a = M.encode(tiny_params, tiny_cfg, ids(4, 5, 6)).data
    b = M.encode(tiny_params, tiny_cfg, ids(4, 5, 6)).data
    assert a.tobytes() == b.tobytes()


def test_encode_padding_invariance(tiny_params, tiny_cfg):
    seq = [4, 5, 6, 7]
    short = np.array([seq + [tok.PAD_ID] * 2], dtype=np.int32)
    long = np.array([seq + [tok.PAD_ID] * 6], dtype=np.int32)
    mask_s = np.array([[True] * 4 + [False] * 2])
    mask_l = np.array([[True] * 4 + [False] * 6])
    out_s = M.encode_batch(tiny_params, tiny_cfg, short, mask_s).data[0, :4]
    out_l = M.encode_batch(tiny_params, tiny_cfg, long, mask_l).data[0, :4]
    assert np.allclose(out_s, out_l, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# decoder


def test_decode_shape(tiny_params, tiny_cfg):
    enc = M.encode(tiny_params, tiny_cfg, ids(4, 5, 6))
    tgt = ids(tok.BOS_ID, 8, 9, 10)
    logits = M.decode(tiny_params, tiny_cfg, enc, np.ones(3, dtype=bool), tgt)
    assert logits.shape == (4, tiny_cfg.vocab_size)


def test_decode_requires_bos(tiny_params, tiny_cfg):
    enc = M.encode(tiny_params, tiny_cfg, ids(4, 5, 6))
    with pytest.raises(ValueError):
        M.decode(tiny_params, tiny_cfg, enc, np.ones(3, dtype=bool), ids(8, 9))


def test_decode_causality(tiny_params, tiny_cfg):
    enc = M.encode(tiny_params, tiny_cfg, ids(4, 5, 6))
    mask = np.ones(3, dtype=bool)
    base = M.decode(tiny_params, tiny_cfg, enc, mask, ids(tok.BOS_ID, 8, 9, 10)).data
    for t in range(3):
        mutated = [tok.BOS_ID, 8, 9, 10]
        mutated[t + 1] = 21
        got = M.decode(tiny_params, tiny_cfg, enc, mask, ids(*mutated)).data
        assert np.allclose(base[: t + 1], got[: t + 1], atol=1e-6), f"position {t}"


def test_decode_overlong_raises(tiny_params, tiny_cfg):
    enc = M.encode(tiny_params, tiny_cfg, ids(4, 5))
    tgt = np.full(tiny_cfg.max_tgt_len + 2, 4, dtype=np.int32)
    tgt[0] = tok.BOS_ID
    with pytest.raises(M.LengthError):
        M.decode(tiny_params, tiny_cfg, enc, np.ones(2, dtype=bool), tgt)


def test_zero_layer_decoder_reduces_to_embedding_head(tiny_cfg):
    cfg = M.ModelConfig(
        vocab_size=tiny_cfg.vocab_size,
        d_model=16,
        n_heads=2,
        n_enc_layers=1,
        n_dec_layers=0,
        d_ff=24,
        max_src_len=12,
        max_tgt_len=16,
        dropout_rate=0.0,
        proj_hidden=12,
    )
    params = M.init_params(cfg, seed=3)
    enc = M.encode(params, cfg, ids(4, 5))
    tgt = ids(tok.BOS_ID, 7, 9)
    logits = M.decode(params, cfg, enc, np.ones(2, dtype=bool), tgt).data

    emb = params["emb.tok"].data
    pos = params["emb.pos_dec"].data
    x = emb[np.asarray(tgt)] + pos[: len(tgt)]
    mu = x.mean(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(x.var(axis=1, keepdims=True) + 1e-5)
    states = xhat * params["dec.ln_f.g"].data + params["dec.ln_f.b"].data
    expected = states @ emb.T
    assert np.allclose(logits, expected, atol=1e-5)


# ---------------------------------------------------------------------------
# embedding tying


def test_embedding_tying_single_storage(tiny_cfg):
    params = M.init_params(tiny_cfg, seed=2)
    src = ids(4, 5)
    tgt = ids(tok.BOS_ID, 6)
    enc0 = M.encode(params, tiny_cfg, src).data.copy()
    logits0 = M.decode(params, tiny_cfg, M.encode(params, tiny_cfg, src), np.ones(2, dtype=bool), tgt).data.copy()
    # non-uniform bump (a constant row shift would cancel in layer norm)
    params["emb.tok"].data[4, 0] += 0.5
    params["emb.tok"].data[6, 1] -= 0.5
    enc1 = M.encode(params, tiny_cfg, src).data
    logits1 = M.decode(params, tiny_cfg, M.encode(params, tiny_cfg, src), np.ones(2, dtype=bool), tgt).data
    assert not np.allclose(enc0, enc1)
    assert not np.allclose(logits0, logits1)


def test_tied_embedding_accumulates_all_paths(tiny_cfg):
    params = M.init_params(tiny_cfg, seed=4)
    ex = EncodedExample(ids(4, 5, 6), ids(8, 9))
    with Tape():
        loss = M.lm_loss(params, tiny_cfg, ex)
        backward(loss)
    assert params["emb.tok"].grad is not None
    # rows used by encoder input, decoder input, and every row via the head
    assert np.abs(params["emb.tok"].grad).sum() > 0


# ---------------------------------------------------------------------------
# projections


def test_projections_differ_and_shapes(tiny_params, tiny_cfg):
    v = Tensor(np.random.default_rng(0).standard_normal(tiny_cfg.d_model).astype(np.float32))
    pe = M.project_enc(tiny_params, v)
    pd = M.project_dec(tiny_params, v)
    assert pe.shape == (tiny_cfg.d_model,)
    assert pd.shape == (tiny_cfg.d_model,)
    assert not np.allclose(pe.data, pd.data)


def test_projection_gradient(tiny_cfg):
    params = M.init_params(tiny_cfg, seed=7, dtype=np.float64)
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal(tiny_cfg.d_model), requires_grad=True, dtype=np.float64)

    def f(v):
        return T.sum_(M.project_enc(params, v))

    assert T.finite_diff_check(f, x) < 1e-4


def test_relation_embedding_is_masked_pool(tiny_params, tiny_cfg):
    states = M.encode(tiny_params, tiny_cfg, ids(4, 5, 6, tok.PAD_ID), np.array([True, True, True, False]))
    emb = M.relation_embedding(states, np.array([True, True, True, False]), source="original")
    manual = states.data[:3].mean(axis=0)
    assert np.allclose(emb.vector.data, manual, atol=1e-6)
    assert emb.source == "original"


# ---------------------------------------------------------------------------
# lm loss


def test_lm_loss_near_uniform_at_init():
    cfg = M.ModelConfig(vocab_size=256)
    params = M.init_params(cfg, seed=0)
    rng = np.random.default_rng(3)
    ex = EncodedExample(
        rng.integers(8, 256, size=10).astype(np.int32),
        rng.integers(8, 256, size=12).astype(np.int32),
    )
    loss = M.lm_loss(params, cfg, ex).item()
    assert abs(loss - np.log(256)) < 0.5


def test_lm_loss_pad_invariant(tiny_params, tiny_cfg):
    src = [ids(4, 5, 6)]
    refs = [ids(8, 9, 10)]
    src_arr, smask = M.pad_sources(src)
    tgt_in, labels, lmask = M.make_target_arrays(refs)
    enc = M.encode_batch(tiny_params, tiny_cfg, src_arr, smask)
    base, _ = M.nll_per_example(tiny_params, tiny_cfg, enc, smask, tgt_in, labels, lmask)

    pad_n = 4
    tgt_in2 = np.concatenate([tgt_in, np.full((1, pad_n), tok.PAD_ID, dtype=np.int32)], axis=1)
    labels2 = np.concatenate([labels, np.full((1, pad_n), tok.PAD_ID, dtype=np.int32)], axis=1)
    lmask2 = np.concatenate([lmask, np.zeros((1, pad_n), dtype=bool)], axis=1)
    padded, _ = M.nll_per_example(tiny_params, tiny_cfg, enc, smask, tgt_in2, labels2, lmask2)
    assert np.allclose(base.data, padded.data, atol=1e-6)


def test_dropout_changes_output_and_eval_is_deterministic(tiny_cfg):
    cfg = M.ModelConfig(
        vocab_size=32, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
        d_ff=24, max_src_len=12, max_tgt_len=16, dropout_rate=0.5, proj_hidden=12,
    )
    params = M.init_params(cfg, seed=9)
    src = np.array([[4, 5, 6]], dtype=np.int32)
    mask = np.ones((1, 3), dtype=bool)
    t1 = M.encode_batch(params, cfg, src, mask, train=True, rng=derive_rng(0)).data
    t2 = M.encode_batch(params, cfg, src, mask, train=True, rng=derive_rng(1)).data
    assert not np.allclose(t1, t2)
    e1 = M.encode_batch(params, cfg, src, mask).data
    e2 = M.encode_batch(params, cfg, src, mask).data
    assert e1.tobytes() == e2.tobytes()


def test_forward_counters(tiny_params, tiny_cfg):
    M.reset_forward_counts()
    src = np.array([[4, 5, 6], [7, 8, 9]], dtype=np.int32)
    mask = np.ones((2, 3), dtype=bool)
    enc = M.encode_batch(tiny_params, tiny_cfg, src, mask)
    tgt_in, labels, lmask = M.make_target_arrays([ids(8, 9), ids(10,)])
    M.nll_per_example(tiny_params, tiny_cfg, enc, mask, tgt_in, labels, lmask)
    assert M.FORWARD_COUNTS == {"encode": 2, "decode": 2}
