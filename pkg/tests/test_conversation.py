import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_rel_error, mha_oracle
from hypercrs import conversation as C
from hypercrs.config import Config
from hypercrs.corpus import synthetic_vocab
from hypercrs.numeric import tensor as T


def _cfg(**kw):
    base = dict(d_conv=8, d_rec=4, conv_heads=2, rec_heads=2, enc_layers=2, dec_layers=1,
                ffn_mult=2, max_response_tokens=6)
    base.update(kw)
    return Config(**base)


def _model(rng=None, **kw):
    vocab = synthetic_vocab(12)
    mask = vocab.item_mask(range(6))
    model = C.ConversationModel(vocab, mask, _cfg(**kw), rng or np.random.default_rng(2))
    # nonzero biases and norm parameters so that the oracles see every term
    r = np.random.default_rng(3)
    for name, t in model.store.items():
        if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".beta")):
            t.data[...] = r.normal(scale=0.1, size=t.shape)
        elif name.endswith(".gamma"):
            t.data[...] = 1.0 + r.normal(scale=0.1, size=t.shape)
    return model


def _raw(p, prefix):
    pre = prefix + "."
    return {k[len(pre):]: v.data for k, v in p.items() if k.startswith(pre)}


# -- numpy oracles ---------------------------------------------------------------
def _ln(x, p, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * p["gamma"] + p["beta"]


def _ffn(x, p):
    return np.maximum(x @ p["l1.w"] + p["l1.b"], 0.0) @ p["l2.w"] + p["l2.b"]


def _positions(n, d):
    pe = np.zeros((n, d))
    for pos in range(n):
        for i in range(d):
            angle = pos / 10000 ** (2 * (i // 2) / d)
            pe[pos, i] = math.sin(angle) if i % 2 == 0 else math.cos(angle)
    return pe


def _causal_mha(X, p, heads):
    rows = [mha_oracle(X[i:i + 1], X[:i + 1], X[:i + 1], heads, p) for i in range(len(X))]
    return np.vstack(rows)


def _encoder_oracle(tokens, emb, layers, heads):
    x = emb[tokens] + _positions(len(tokens), emb.shape[1])
    for p in layers:
        a = _ln(x + mha_oracle(x, x, x, heads, _raw(p, "attn")), _raw(p, "ln1"))
        x = _ln(a + _ffn(a, _raw(p, "ffn")), _raw(p, "ln2"))
    return x


def _decoder_oracle(R, X_C, X_H, N_SK, beta, p, heads):
    A0 = _ln(R + _causal_mha(R, _raw(p, "self"), heads), _raw(p, "ln0"))
    A1 = _ln(A0 + mha_oracle(A0, N_SK, N_SK, heads, _raw(p, "nsk")), _raw(p, "ln1"))
    A2 = _ln(A1 + mha_oracle(A1, X_C, X_C, heads, _raw(p, "cur")), _raw(p, "ln2"))
    A3 = _ln(A1 + mha_oracle(A1, X_H, X_H, heads, _raw(p, "hist")), _raw(p, "ln3"))
    A4 = beta * A2 + (1 - beta) * A3
    return _ln(A4 + _ffn(A4, _raw(p, "ffn")), _raw(p, "ln4"))


# -- encoder ---------------------------------------------------------------------
def test_encoder_shapes():
    m = _model()
    emb = m.store["tok_emb"]
    assert C.encode_dialogue([4, 5, 6], emb, m._encoder("enc_cur"), 2).shape == (3, 8)
    assert C.encode_dialogue([], emb, m._encoder("enc_cur"), 2).shape == (0, 8)
    with pytest.raises(ValueError):
        C.encode_dialogue([len(m.vocab)], emb, m._encoder("enc_cur"), 2)


def test_encoder_is_position_sensitive():
    m = _model()
    emb, layers = m.store["tok_emb"], m._encoder("enc_cur")
    ab = C.encode_dialogue([7, 9], emb, layers, 2).data
    ba = C.encode_dialogue([9, 7], emb, layers, 2).data
    assert not np.allclose(ab[0], ba[1]) and not np.allclose(ab[1], ba[0])


def test_encoder_two_layer_oracle():
    m = _model()
    toks = [4, 11, 5, 20, 4]
    got = C.encode_dialogue(toks, m.store["tok_emb"], m._encoder("enc_cur"), 2).data
    want = _encoder_oracle(toks, m.store["tok_emb"].data, m._encoder("enc_cur"), 2)
    assert np.max(np.abs(got - want)) <= 1e-10


# -- decoder ---------------------------------------------------------------------
def _ctx(rng, beta, n_c=4, n_h=5, n_sk=3, d=8):
    return C.GenContext(T.Tensor(rng.normal(size=(n_c, d))), T.Tensor(rng.normal(size=(n_h, d))),
                        T.Tensor(rng.normal(size=(n_sk, d))), None, beta)


def test_decoder_layer_oracle(rng):
    m = _model()
    p = m.store.scope("dec.0")
    ctx = _ctx(rng, 0.3)
    R = rng.normal(size=(4, 8))
    got = C.decoder_layer(T.Tensor(R), ctx, p, 2).data
    want = _decoder_oracle(R, ctx.X_C.data, ctx.X_H.data, ctx.N_SK.data, 0.3, p, 2)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_decoder_beta_one_ignores_history(rng):
    m = _model()
    p = m.store.scope("dec.0")
    R = T.Tensor(rng.normal(size=(3, 8)))
    ctx = _ctx(rng, 1.0)
    without = C.GenContext(ctx.X_C, None, ctx.N_SK, None, 1.0)
    assert np.array_equal(C.decoder_layer(R, ctx, p, 2).data,
                          C.decoder_layer(R, without, p, 2).data)


def test_decoder_beta_zero_shared_branch(rng):
    m = _model()
    p = dict(m.store.scope("dec.0"))
    for k in list(p):
        if k.startswith("hist."):
            p[k] = p["cur." + k[5:]]
        if k.startswith("ln3."):
            p[k] = p["ln2." + k[4:]]
    R = T.Tensor(rng.normal(size=(3, 8)))
    ctx = _ctx(rng, 0.0)
    shared = C.GenContext(ctx.X_C, ctx.X_C, ctx.N_SK, None, 0.0)
    plain = C.GenContext(ctx.X_C, None, ctx.N_SK, None, 1.0)
    got = C.decoder_layer(R, shared, p, 2).data
    assert np.max(np.abs(got - C.decoder_layer(R, plain, p, 2).data)) <= 1e-12


def test_decoder_needs_current(rng):
    m = _model()
    ctx = C.GenContext(T.Tensor(np.zeros((0, 8))))
    with pytest.raises(ValueError):
        C.decoder_layer(T.Tensor(rng.normal(size=(2, 8))), ctx, m.store.scope("dec.0"), 2)


def test_decoder_is_causal(rng):
    m = _model()
    p = m.store.scope("dec.0")
    ctx = _ctx(rng, 0.5)
    R = rng.normal(size=(5, 8))
    full = C.decoder_layer(T.Tensor(R), ctx, p, 2).data
    prefix = C.decoder_layer(T.Tensor(R[:3]), ctx, p, 2).data
    assert np.max(np.abs(full[:3] - prefix)) <= 1e-12


def test_model_without_history_encoder_matches_beta_one():
    """Same weights, history branch removed: outputs are bit-identical at beta = 1."""
    full = _model(beta=1.0)
    lean = _model(beta=1.0, use_history_encoder=False)
    lean.store.load_state_dict({k: v for k, v in full.store.state_dict().items()
                                if k in lean.store})
    ex = C.ConvExample("s", 1, [4, 12, 5], [6, 7, 8], [9, 10], np.ones((2, 4)), np.ones(4))
    assert np.array_equal(full.teacher_logits(ex)[0].data, lean.teacher_logits(ex)[0].data)


# -- output layer ----------------------------------------------------------------
def test_generate_step_without_user_is_plain_softmax(rng):
    m = _model()
    p = m._head_params()
    R = rng.normal(size=(2, 8))
    got = C.generate_step(T.Tensor(R), None, p, m.item_mask).data
    z = R @ p["out.w"].data + p["out.b"].data
    want = np.exp(z - z.max(axis=1, keepdims=True))
    want /= want.sum(axis=1, keepdims=True)
    assert np.max(np.abs(got - want)) <= 1e-14


def test_copy_term_is_zero_off_items(rng):
    m = _model()
    p = m._head_params()
    R, u = T.Tensor(rng.normal(size=(3, 8))), T.Tensor(rng.normal(size=4))
    with_copy = C.output_logits(R, u, p, m.item_mask).data
    no_copy = C.output_logits(R, u, p, m.item_mask, use_copy=False).data
    off = ~m.item_mask
    assert np.array_equal(with_copy[:, off], no_copy[:, off])
    assert not np.allclose(with_copy[:, m.item_mask], no_copy[:, m.item_mask])


def test_three_term_oracle(rng):
    V, d, dr = 8, 4, 3
    mask = np.array([0, 1, 0, 0, 1, 0, 1, 0], dtype=bool)
    p = {"out.w": rng.normal(size=(d, V)), "out.b": rng.normal(size=V),
         "user_bias.w": rng.normal(size=(dr, V)), "user_bias.b": rng.normal(size=V),
         "user_proj.w": rng.normal(size=(dr, d)), "user_proj.b": rng.normal(size=d),
         "copy.w": rng.normal(size=(d, d)), "tok_emb": rng.normal(size=(V, d))}
    R, u = rng.normal(size=(1, d)), rng.normal(size=dr)
    z = np.zeros(V)
    for v in range(V):
        s1 = sum(R[0, a] * p["out.w"][a, v] for a in range(d)) + p["out.b"][v]
        s2 = sum(u[a] * p["user_bias.w"][a, v] for a in range(dr)) + p["user_bias.b"][v]
        s3 = 0.0
        if mask[v]:
            up = u @ p["user_proj.w"] + p["user_proj.b"]
            key = [sum(R[0, a] * p["copy.w"][a, b] for a in range(d)) * up[b] for b in range(d)]
            s3 = sum(key[b] * p["tok_emb"][v, b] for b in range(d))
        z[v] = s1 + s2 + s3
    want = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    got = C.generate_step(T.Tensor(R), T.Tensor(u), {k: T.Tensor(v) for k, v in p.items()},
                          mask).data[0]
    assert np.max(np.abs(got - want)) <= 1e-12


def test_copy_needs_items(rng):
    m = _model()
    with pytest.raises(ValueError):
        C.output_logits(T.Tensor(rng.normal(size=(1, 8))), T.Tensor(np.ones(4)),
                        m._head_params(), np.zeros(len(m.vocab), dtype=bool))


# -- loss / diversity ------------------------------------------------------------
def test_gen_loss_confident_is_zero():
    logits = np.full((3, 10), -1000.0)
    y = [2, 5, 9]
    logits[np.arange(3), y] = 0.0
    assert C.gen_loss([T.Tensor(logits)], [y]).item() == 0.0


def test_gen_loss_uniform():
    got = C.gen_loss([T.Tensor(np.zeros((3, 10)))], [[1, 2, 3]]).item()
    assert abs(got - 3 * math.log(10)) <= 1e-14


def test_gen_loss_oracle(rng):
    lg = [rng.normal(size=(2, 5)), rng.normal(size=(4, 5))]
    ys = [[0, 3], [4, 4, 1, 2]]
    total = 0.0
    for z, y in zip(lg, ys):
        for t, yt in enumerate(y):
            total -= z[t, yt] - math.log(sum(math.exp(x) for x in z[t]))
    got = C.gen_loss([T.Tensor(z) for z in lg], ys).item()
    assert abs(got - total / 2) <= 1e-12


def test_gen_loss_gradient(rng):
    lg = [T.Tensor(rng.normal(size=(3, 6)), requires_grad=True),
          T.Tensor(rng.normal(size=(2, 6)), requires_grad=True)]
    ys = [[1, 5, 0], [3, 3]]
    assert max_rel_error(lambda: C.gen_loss(lg, ys), lg) <= 1e-4


def test_gen_loss_errors():
    with pytest.raises(ValueError):
        C.gen_loss([], [])
    with pytest.raises(ValueError):
        C.gen_loss([T.Tensor(np.zeros((0, 3)))], [[]])


def test_distinct_examples():
    assert C.distinct_n([["a", "b", "c"]], 2) == 2.0
    assert C.distinct_n([["a", "b", "c"], ["a", "b", "c"]], 2) == 1.0
    assert C.distinct_n([["a"]], 2) == 0.0
    assert C.distinct_n([], 3) == 0.0


def _distinct_oracle(responses, n):
    seen = {}
    for r in responses:
        for i in range(len(r) - n + 1):
            seen[" ".join(map(str, r[i:i + n]))] = True
    return len(seen) / len(responses)


def test_distinct_oracle_fixture():
    rng = np.random.default_rng(21)
    responses = [rng.integers(0, 6, size=rng.integers(0, 12)).tolist() for _ in range(5)]
    for n in (2, 3, 4):
        assert C.distinct_n(responses, n) == _distinct_oracle(responses, n)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 4), max_size=8), min_size=1, max_size=6),
       st.integers(1, 4))
def test_distinct_matches_oracle(responses, n):
    assert C.distinct_n(responses, n) == _distinct_oracle(responses, n)


# -- generation ------------------------------------------------------------------
def _example(vocab, words, response=()):
    return C.ConvExample("s", 1, [vocab.index[w] for w in words], [],
                         [vocab.index[w] for w in response], np.zeros((0, 4)), None)


def test_generate_zero_length():
    m = _model()
    assert m.generate(_example(m.vocab, ["hello"]), max_len=0) == []


def test_generate_greedy_is_deterministic():
    m = _model()
    ex = _example(m.vocab, ["hello", "ent_3"])
    a = m.generate(ex)
    assert a == m.generate(ex) and len(a) <= 6
    assert m.vocab.end not in a
    assert m.generate(ex, mode="topk", rng=np.random.default_rng(0), k=1) == a
    with pytest.raises(ValueError):
        m.generate(ex, mode="beam")


def test_overfit_five_templates():
    vocab = synthetic_vocab(20)
    cfg = Config(d_conv=32, d_rec=8, conv_heads=2, enc_layers=1, dec_layers=1, ffn_mult=2,
                 lr=0.01, conv_batch_size=5, max_response_tokens=12, seed=0)
    model = C.ConversationModel(vocab, vocab.item_mask(range(10)), cfg, np.random.default_rng(0))
    templates = [["how", "about", "ent_1"], ["you", "might", "enjoy", "ent_2"],
                 ["great", "thanks"], ["try", "ent_3", "and", "ent_4"],
                 ["what", "else", "maybe", "ent_5", "bye"]]
    u = np.random.default_rng(1).normal(size=(5, 8))
    data = [C.ConvExample(f"s{i}", 1, [vocab.index[w] for w in ("hello", f"ent_{10 + i}", "want")],
                          [], [vocab.index[w] for w in t], np.zeros((0, 8)), u[i])
            for i, t in enumerate(templates)]
    res = C.train_conversation(model, data, epochs=150)
    assert res.history[-1]["loss"] < res.history[1]["loss"]
    for ex in data:
        assert model.generate(ex) == ex.response
