"""Oracles shared by the test modules: central finite differences and an
explicit-loop multi-head attention and hypergraph convolution."""

import math

import numpy as np

from hypercrs.numeric import tensor as T


def max_rel_error(loss_fn, params, h=1e-5, rng=None, max_entries=40):
    """Compare analytic grads of ``loss_fn()`` w.r.t. ``params`` (leaf tensors)
    with central differences on up to ``max_entries`` entries per tensor."""
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            with T.no_grad():
                up = loss_fn().item()
            flat[i] = old - h
            with T.no_grad():
                dn = loss_fn().item()
            flat[i] = old
            num = (up - dn) / (2 * h)
            ana = g.reshape(-1)[i]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            worst = max(worst, err)
    return worst


def mha_oracle(Q, K, V, heads, p, key_mask=None):
    """Explicit per-head loops, then concatenation and output projection."""
    d = Q.shape[1]
    dh = d // heads
    q = Q @ p["wq"] + p["bq"]
    k = K @ p["wk"] + p["bk"]
    v = V @ p["wv"] + p["bv"]
    out = np.zeros((Q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(Q.shape[0]):
            s = []
            for j in range(K.shape[0]):
                if key_mask is not None and not key_mask[j]:
                    continue
                s.append((j, sum(q[i, sl][t] * k[j, sl][t] for t in range(dh)) / math.sqrt(dh)))
            m = max(x for _, x in s)
            z = sum(math.exp(x - m) for _, x in s)
            for j, x in s:
                out[i, sl] += math.exp(x - m) / z * v[j, sl]
    return out @ p["wo"] + p["bo"]


def hconv_oracle(H, X, W):
    """Double sum over vertices and hyperedges, one feature at a time."""
    n, m = H.shape
    d_in, d_out = W.shape
    deg_v = [sum(H[i, e] for e in range(m)) for i in range(n)]
    deg_e = [sum(H[i, e] for i in range(n)) for e in range(m)]
    out = np.zeros((n, d_out))
    for i in range(n):
        for j in range(n):
            for e in range(m):
                c = H[i, e] * H[j, e] / (deg_v[i] * deg_e[e])
                if c == 0:
                    continue
                for a in range(d_in):
                    for b in range(d_out):
                        out[i, b] += c * X[j, a] * W[a, b]
    return out
