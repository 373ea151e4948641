"""Attention, feed-forward and normalisation blocks over ``Tensor``.

Parameters are passed as plain dicts of tensors so that blocks can share
weights by passing the same dict twice.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .params import glorot

MASK_VALUE = -1e9


def init_linear(store, name, d_in, d_out, rng, bias=True):
    store.add(f"{name}.w", glorot(rng, d_in, d_out))
    if bias:
        store.add(f"{name}.b", np.zeros(d_out))


def linear(x, p):
    out = x @ p["w"]
    if "b" in p:
        out = out + p["b"]
    return out


def init_mha(store, name, d, rng):
    for proj in ("q", "k", "v", "o"):
        store.add(f"{name}.w{proj}", glorot(rng, d, d))
        store.add(f"{name}.b{proj}", np.zeros(d))


def init_layer_norm(store, name, d):
    store.add(f"{name}.gamma", np.ones(d))
    store.add(f"{name}.beta", np.zeros(d))


def layer_norm(x, p, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred * T.power(var + eps, -0.5) * p["gamma"] + p["beta"]


def init_ffn(store, name, d, hidden, rng):
    init_linear(store, f"{name}.l1", d, hidden, rng)
    init_linear(store, f"{name}.l2", hidden, d, rng)


def feed_forward(x, p):
    """Two affine maps with a ReLU between them."""
    w1, b1, w2, b2 = p["l1.w"], p["l1.b"], p["l2.w"], p["l2.b"]
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ValueError("feed_forward shape mismatch")
    return T.relu(x @ w1 + b1) @ w2 + b2


def causal_mask(n):
    """Additive mask that hides positions j > i from query i."""
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def multi_head_attention(Q, K, V, heads, p, key_mask=None, attn_mask=None):
    """Scaled dot-product attention split over ``heads``.

    Works on 2-D inputs ``(len, d)`` or batched 3-D inputs ``(B, len, d)``.
    ``key_mask`` is a boolean array of valid keys (``(k,)`` or ``(B, k)``);
    ``attn_mask`` is an additive ``(q, k)`` array such as ``causal_mask``.
    """
    d = Q.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    if K.shape[-2] == 0:
        raise ValueError("attention over zero keys")
    dh = d // heads
    batched = Q.ndim == 3
    q = T.matmul(Q, p["wq"]) + p["bq"]
    k = T.matmul(K, p["wk"]) + p["bk"]
    v = T.matmul(V, p["wv"]) + p["bv"]

    def split(x):
        n = x.shape[-2]
        if batched:
            return T.transpose(x.reshape(x.shape[0], n, heads, dh), (0, 2, 1, 3))
        return T.transpose(x.reshape(n, heads, dh), (1, 0, 2))

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.matmul(qh, T.swap_last(kh)) * (1.0 / math.sqrt(dh))
    add = None
    if attn_mask is not None:
        add = np.asarray(attn_mask, dtype=scores.data.dtype)
    if key_mask is not None:
        km = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_VALUE)
        km = km[:, None, None, :] if batched else km[None, None, :]
        add = km if add is None else add + km
    if add is not None:
        scores = scores + add
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, vh)
    nq = Q.shape[-2]
    if batched:
        ctx = T.transpose(ctx, (0, 2, 1, 3)).reshape(Q.shape[0], nq, d)
    else:
        ctx = T.transpose(ctx, (1, 0, 2)).reshape(nq, d)
    return T.matmul(ctx, p["wo"]) + p["bo"]


def sinusoid_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
