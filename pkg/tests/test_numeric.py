import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import max_rel_error, mha_oracle
from hypercrs.numeric import checkpoint as ckpt
from hypercrs.numeric import layers as L
from hypercrs.numeric import tensor as T
from hypercrs.numeric.optim import AdamState, adam_step, warmup_lr
from hypercrs.numeric.params import ParameterStore


# -- matmul -------------------------------------------------------------------
def test_matmul_identity():
    A = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), T.Tensor(A)).data, A)


def test_matmul_hand_case():
    out = T.matmul(T.Tensor([[1, 2], [3, 4]]), T.Tensor([[1], [1]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_triple_loop_oracle(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    want = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    assert np.max(np.abs(got - want)) <= 1e-12


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.matmul(T.Tensor(np.ones(3)), T.Tensor(np.ones((3, 1))))


def test_non_finite_rejected():
    with pytest.raises(FloatingPointError):
        T.Tensor([1.0, np.nan])
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        T.exp(T.Tensor([1000.0]))


# -- softmax ---------------------------------------------------------------
def test_softmax_uniform():
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_closed_form():
    assert np.allclose(T.softmax(T.Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    a = T.softmax(T.Tensor(x)).data
    b = T.softmax(T.Tensor(x + c)).data
    assert np.allclose(a, b, atol=1e-12)
    assert abs(a.sum() - 1.0) < 1e-12


def test_softmax_empty_axis():
    with pytest.raises(ValueError):
        T.softmax(T.Tensor(np.zeros((2, 0))), axis=1)


# -- attention ---------------------------------------------------------------
def _identity_mha(d):
    p = {}
    for proj in "qkvo":
        p[f"w{proj}"] = T.Tensor(np.eye(d))
        p[f"b{proj}"] = T.Tensor(np.zeros(d))
    return p


def test_mha_single_key_returns_value():
    p = _identity_mha(4)
    V = np.array([[0.3, -1.0, 2.0, 0.5]])
    Q = np.array([[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.5, 0.0]])
    out = L.multi_head_attention(T.Tensor(Q), T.Tensor(V), T.Tensor(V), 2, p).data
    assert np.allclose(out, np.repeat(V, 2, axis=0), atol=1e-15)


def test_mha_uniform_logits_give_mean(rng):
    p = _identity_mha(4)
    Q = np.array([[1.0, 0.0, 0.0, 0.0]])
    K = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    V = rng.normal(size=(3, 4))
    out = L.multi_head_attention(T.Tensor(Q), T.Tensor(K), T.Tensor(V), 1, p).data
    assert np.allclose(out[0], V.mean(axis=0), atol=1e-14)


def _random_mha(d, rng):
    store = ParameterStore()
    L.init_mha(store, "a", d, rng)
    for name, t in store.items():
        t.data[...] = rng.normal(size=t.shape)
    return store.scope("a")


def test_mha_matches_per_head_oracle(rng):
    p = _random_mha(6, rng)
    Q, K, V = rng.normal(size=(3, 6)), rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    got = L.multi_head_attention(T.Tensor(Q), T.Tensor(K), T.Tensor(V), 3, p).data
    want = mha_oracle(Q, K, V, 3, {k: v.data for k, v in p.items()})
    assert np.max(np.abs(got - want)) <= 1e-10


def test_mha_batched_key_mask_matches_unbatched(rng):
    p = _random_mha(4, rng)
    Q, K = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
    mask = np.array([[True, True, False, True, False], [True, False, False, False, False]])
    got = L.multi_head_attention(T.Tensor(Q), T.Tensor(K), T.Tensor(K), 2, p, key_mask=mask).data
    for b in range(2):
        want = mha_oracle(Q[b], K[b], K[b], 2, {k: v.data for k, v in p.items()}, mask[b])
        assert np.max(np.abs(got[b] - want)) <= 1e-10


def test_mha_errors():
    p = _identity_mha(4)
    with pytest.raises(ValueError):
        L.multi_head_attention(T.Tensor(np.ones((1, 4))), T.Tensor(np.ones((1, 4))),
                               T.Tensor(np.ones((1, 4))), 3, p)
    with pytest.raises(ValueError):
        L.multi_head_attention(T.Tensor(np.ones((1, 4))), T.Tensor(np.zeros((0, 4))),
                               T.Tensor(np.zeros((0, 4))), 2, p)


def test_causal_mask_hides_future(rng):
    p = _random_mha(4, rng)
    X = rng.normal(size=(5, 4))
    full = L.multi_head_attention(T.Tensor(X), T.Tensor(X), T.Tensor(X), 2, p,
                                  attn_mask=L.causal_mask(5)).data
    X2 = X.copy()
    X2[3:] = rng.normal(size=(2, 4))
    part = L.multi_head_attention(T.Tensor(X2), T.Tensor(X2), T.Tensor(X2), 2, p,
                                  attn_mask=L.causal_mask(5)).data
    assert np.array_equal(full[:3], part[:3])


# -- feed-forward --------------------------------------------------------------
def _ffn(w1, b1, w2, b2):
    return {"l1.w": T.Tensor(w1), "l1.b": T.Tensor(b1), "l2.w": T.Tensor(w2), "l2.b": T.Tensor(b2)}


def test_ffn_zero_weights_gives_bias(rng):
    b2 = rng.normal(size=3)
    p = _ffn(np.zeros((3, 5)), rng.normal(size=5), np.zeros((5, 3)), b2)
    out = L.feed_forward(T.Tensor(rng.normal(size=(4, 3))), p).data
    assert np.array_equal(out, np.tile(b2, (4, 1)))


def test_ffn_identity_on_nonnegative(rng):
    p = _ffn(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
    x = np.abs(rng.normal(size=(4, 3)))
    assert np.array_equal(L.feed_forward(T.Tensor(x), p).data, x)


def test_ffn_composed_oracle(rng):
    w1, b1, w2, b2 = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=(6, 3)), rng.normal(size=3)
    x = rng.normal(size=(4, 3))
    want = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    got = L.feed_forward(T.Tensor(x), _ffn(w1, b1, w2, b2)).data
    assert np.max(np.abs(got - want)) <= 1e-12


def test_layer_norm_rows(rng):
    p = {"gamma": T.Tensor(np.ones(5)), "beta": T.Tensor(np.zeros(5))}
    y = L.layer_norm(T.Tensor(rng.normal(size=(3, 5)) * 4 + 2), p).data
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=1), 1.0, atol=1e-4)


# -- backward --------------------------------------------------------------------
def test_backward_sum_gives_ones(rng):
    x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_dot(rng):
    a, b = rng.normal(size=5), rng.normal(size=5)
    x, y = T.Tensor(a, requires_grad=True), T.Tensor(b, requires_grad=True)
    T.backward((x * y).sum())
    assert np.array_equal(x.grad, b) and np.array_equal(y.grad, a)


def test_backward_needs_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_backward_accumulates_shared_use():
    x = T.Tensor([2.0], requires_grad=True)
    T.backward((x * x + x).sum())
    assert x.grad.tolist() == [5.0]


def test_no_grad_records_nothing():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_finite_differences_attention_block(rng):
    store = ParameterStore()
    L.init_mha(store, "a", 4, rng)
    L.init_layer_norm(store, "ln", 4)
    L.init_ffn(store, "f", 4, 8, rng)
    X = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def loss():
        h = L.layer_norm(X + L.multi_head_attention(X, X, X, 2, store.scope("a"),
                                                    attn_mask=L.causal_mask(3)), store.scope("ln"))
        return T.log_softmax(L.feed_forward(h, store.scope("f")), axis=-1)[:, 1].sum()

    params = [X] + [t for _, t in store.items()]
    assert max_rel_error(loss, params) <= 1e-4


def test_finite_differences_elementwise_ops(rng):
    a = T.Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
    b = T.Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True)

    def loss():
        z = T.tanh(a / b) + T.log(a * b) - T.exp(-a) ** 2
        z = T.concat([z, T.relu(a - 1.0)], axis=1)
        return T.l2_normalize(z, axis=1).sum() + T.stack([a, a * 2.0]).mean()

    assert max_rel_error(loss, [a, b]) <= 1e-4


# -- Adam --------------------------------------------------------------------
def test_adam_zero_grad_no_change(rng):
    store = ParameterStore()
    store.add("w", rng.normal(size=4))
    before = store["w"].data.copy()
    adam_step(store, AdamState(lr=0.1))
    assert np.array_equal(store["w"].data, before)


def test_adam_first_step_closed_form():
    store = ParameterStore()
    store.add("w", np.array([1.0, -2.0, 0.5]))
    g = np.array([0.3, -4.0, 1e-3])
    store["w"].grad[...] = g
    st_ = AdamState(lr=0.01)
    adam_step(store, st_)
    want = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(store["w"].data, want, atol=1e-12)


def test_adam_quadratic_scalar_oracle():
    store = ParameterStore()
    store.add("w", np.array([1.0]))
    st_ = AdamState(lr=0.1)
    for _ in range(100):
        store.zero_grad()
        w = store["w"]
        T.backward((w * w).sum())
        adam_step(store, st_)
    assert abs(store["w"].data[0]) < 0.1


def test_adam_shape_drift():
    store = ParameterStore()
    store.add("w", np.ones(2))
    st_ = AdamState()
    store["w"].grad[...] = 1.0
    adam_step(store, st_)
    store._tensors["w"] = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        adam_step(store, st_)


def test_warmup_schedule():
    assert warmup_lr(0, 100, 1.0) == pytest.approx(0.1)
    assert warmup_lr(9, 100, 1.0) == pytest.approx(1.0)
    assert warmup_lr(50, 100, 1.0) == 1.0


# -- checkpoints -------------------------------------------------------------
def test_checkpoint_round_trip(rng, tmp_path):
    tensors = {"b": rng.normal(size=(2, 3)), "a.x": rng.normal(size=4).astype(np.float32),
               "s": np.array(3.5)}
    path = tmp_path / "m.ckpt"
    ckpt.save_checkpoint(path, tensors)
    back = ckpt.load_checkpoint(path)
    assert sorted(back) == sorted(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_layout_bytes():
    buf = ckpt.dumps({"w": np.array([1.0, 2.0])})
    assert buf[:4] == b"MHIM"
    assert buf[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert buf[12:16] == (1).to_bytes(4, "little") and buf[16:17] == b"w"
    assert buf[17:19] == bytes([1, 1]) and buf[19:27] == (2).to_bytes(8, "little")
    assert buf[27:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_checkpoint_errors():
    good = ckpt.dumps({"w": np.ones(3)})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(b"XXXX" + good[4:])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(good[:-3])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(good + b"\x00")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.dumps({"i": np.arange(3)})


def test_store_state_dict_strict(rng):
    store = ParameterStore()
    store.add("w", rng.normal(size=2))
    with pytest.raises((KeyError, ValueError)):
        store.load_state_dict({"v": np.ones(2)})
    with pytest.raises(ValueError):
        store.load_state_dict({"w": np.ones(3)})
