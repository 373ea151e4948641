"""Contrastive subgraph instance discrimination for the KG encoder.

Two random-walk-with-restart subgraphs from the same start vertex form a
positive pair; keys come from a momentum copy of the encoder and earlier
keys are kept in a FIFO queue as negatives.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .kg import EmbeddingTable, RgcnParams, rgcn_propagate, select_critical_nodes
from .numeric import tensor as T
from .numeric.optim import AdamState, adam_step, warmup_lr
from .numeric.params import ParameterStore


@dataclass(frozen=True)
class SubgraphInstance:
    start: int
    vertices: tuple
    edges: np.ndarray = field(compare=False)

    def __len__(self):
        return len(self.vertices)


def random_walk(kg, v, hops, restart_p, rng):
    """Vertex sequence of a walk that jumps back to ``v`` with prob ``restart_p``."""
    path = [v]
    if hops <= 0:
        return path
    jumps = rng.random(hops)
    picks = rng.random(hops)
    cur = v
    for step in range(hops):
        if jumps[step] < restart_p:
            cur = v
        else:
            nbrs = kg.neighbours(cur)
            cur = nbrs[int(picks[step] * len(nbrs))] if nbrs else v
        path.append(cur)
    return path


def sample_subgraph(kg, v, hops, restart_p, rng):
    if v not in kg.entities:
        raise ValueError(f"start vertex {v} not in graph")
    if not 0.0 <= restart_p <= 1.0:
        raise ValueError("restart probability must lie in [0, 1]")
    verts = sorted(set(random_walk(kg, v, hops, restart_p, rng)))
    vs = set(verts)
    trip = kg.triplets
    if len(trip):
        keep = np.isin(trip[:, 0], verts) & np.isin(trip[:, 2], verts)
        edges = trip[keep]
    else:
        edges = trip
    assert v in vs
    return SubgraphInstance(v, tuple(verts), edges)


def _batch_adjacency(instances, n_relations):
    """Block-diagonal per-relation message matrices over the stacked instances."""
    rows = collections.defaultdict(list)
    cols = collections.defaultdict(list)
    offset = 0
    for inst in instances:
        local = {v: offset + i for i, v in enumerate(inst.vertices)}
        for h, r, t in inst.edges:
            rows[int(r)].append(local[int(t)])
            cols[int(r)].append(local[int(h)])
            rows[int(r) + n_relations].append(local[int(h)])
            cols[int(r) + n_relations].append(local[int(t)])
        offset += len(inst.vertices)
    out = {}
    for r in sorted(rows):
        out[r] = sp.csr_matrix((np.ones(len(rows[r])), (rows[r], cols[r])), shape=(offset, offset))
    return out, offset


def encode_instances(instances, table, params, n_relations):
    """Encode each instance with the R-GCN restricted to its own edges,
    sum its vertex rows and L2-normalise. Returns a ``(B, d)`` tensor."""
    if any(len(inst) == 0 for inst in instances):
        raise ValueError("empty subgraph instance")
    adj, total = _batch_adjacency(instances, n_relations)
    ids = np.concatenate([np.asarray(inst.vertices, dtype=np.int64) for inst in instances])
    H = rgcn_propagate(adj, table.lookup(ids), params)
    seg = np.repeat(np.arange(len(instances)), [len(inst) for inst in instances])
    S = sp.csr_matrix((np.ones(total), (seg, np.arange(total))), shape=(len(instances), total))
    summed = T.sparse_matmul(S, H)
    if np.any(np.linalg.norm(summed.data, axis=1) == 0.0):
        raise ValueError("degenerate subgraph embedding (zero vector before normalisation)")
    return T.l2_normalize(summed, axis=1)


def subgraph_repr(instance, encoder_params, base, n_relations=None):
    """Representation of one subgraph; ``encoder_params`` is an ``RgcnParams``."""
    if n_relations is None:
        n_relations = max(len(encoder_params.layers[0][1]) // 2, 1)
    return encode_instances([instance], base, encoder_params, n_relations)[0]


def info_nce(q, k_pos, queue, tau=0.07):
    """``-log exp(q.k+/tau) / sum_i exp(q.k_i/tau)`` over the positive and the queue.

    ``q`` and ``k_pos`` are ``(d,)`` or ``(B, d)``; ``queue`` is an ``(M, d)``
    array of negatives (possibly empty). Batched losses are averaged.
    """
    q = T.as_tensor(q)
    k_pos = T.as_tensor(k_pos)
    if q.ndim == 1:
        q = q.reshape(1, -1)
        k_pos = k_pos.reshape(1, -1)
    if q.shape[0] == 0:
        raise ValueError("info_nce needs at least one query/positive pair")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    pos = (q * k_pos).sum(axis=1, keepdims=True)
    queue = np.asarray(queue, dtype=q.data.dtype).reshape(-1, q.shape[1])
    if len(queue):
        logits = T.concat([pos, T.matmul(q, T.Tensor(queue.T))], axis=1)
    else:
        logits = pos
    logp = T.log_softmax(logits * (1.0 / tau), axis=1)
    return -(logp[:, 0].mean())


# -- state -----------------------------------------------------------------
def encoder_store(n_entities, n_relations, d, critical, rng, n_layers=1):
    store = ParameterStore()
    table = EmbeddingTable.init(n_entities, critical, d, rng)
    store.add("emb.table", table.table)
    for name, t in RgcnParams.init(n_relations, d, rng, n_layers).named().items():
        store.add(name, t)
    return store


def encoder_views(store, n_entities, critical):
    """``(EmbeddingTable, RgcnParams)`` sharing the tensors held in ``store``."""
    table = EmbeddingTable(n_entities, critical, store["emb.table"])
    rgcn = RgcnParams.from_named({n: t for n, t in store.items() if n.startswith("rgcn.")})
    return table, rgcn


class ContrastiveState:
    def __init__(self, query, critical, n_entities, n_relations, momentum=0.999, tau=0.07,
                 queue_size=256, hops=128, restart_p=0.5, lr=0.005, weight_decay=1e-4,
                 warmup_frac=0.1, total_steps=1):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.query = query
        self.key = query.copy(requires_grad=False)
        self.critical = sorted(critical)
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.momentum = momentum
        self.tau = tau
        self.capacity = queue_size
        self.queue = collections.deque()
        self.hops = hops
        self.restart_p = restart_p
        self.adam = AdamState(lr=lr, weight_decay=weight_decay)
        self.warmup_frac = warmup_frac
        self.total_steps = total_steps

    def queue_array(self, d):
        if not self.queue:
            return np.zeros((0, d))
        return np.stack(list(self.queue))

    def enqueue(self, keys):
        for k in keys:
            self.queue.append(np.array(k))
            if len(self.queue) > self.capacity:
                self.queue.popleft()

    def encoders(self):
        return (encoder_views(self.query, self.n_entities, self.critical),
                encoder_views(self.key, self.n_entities, self.critical))


def momentum_update(state):
    """``theta_k <- m theta_k + (1 - m) theta_q`` for every encoder tensor."""
    m = state.momentum
    for name, q in state.query.items():
        k = state.key[name]
        if k.data.shape != q.data.shape:
            raise ValueError(f"key/query shape drift on {name}")
        k.data[...] = m * k.data + (1.0 - m) * q.data


def pretrain_step(kg, state, starts, rng):
    (q_table, q_rgcn), (k_table, k_rgcn) = state.encoders()
    q_inst = [sample_subgraph(kg, int(v), state.hops, state.restart_p, rng) for v in starts]
    k_inst = [sample_subgraph(kg, int(v), state.hops, state.restart_p, rng) for v in starts]
    state.query.zero_grad()
    q = encode_instances(q_inst, q_table, q_rgcn, state.n_relations)
    with T.no_grad():
        k = encode_instances(k_inst, k_table, k_rgcn, state.n_relations).data
    loss = info_nce(q, k, state.queue_array(k.shape[1]), state.tau)
    T.backward(loss)
    lr = warmup_lr(state.adam.t, state.total_steps, state.adam.lr, state.warmup_frac)
    adam_step(state.query, state.adam, lr=lr)
    momentum_update(state)
    state.enqueue(k)
    return loss.item()


def pretrain_epoch(kg, state, batch_size, rng):
    """One pass over the graph's vertices in shuffled mini-batches; returns the mean loss."""
    if state.capacity < batch_size:
        raise ValueError("queue capacity is smaller than the batch size")
    ents = np.array(sorted(kg.entities), dtype=np.int64)
    if len(ents) < batch_size:
        raise ValueError("graph has fewer vertices than the batch size")
    perm = ents[rng.permutation(len(ents))]
    losses = []
    for lo in range(0, len(perm) - batch_size + 1, batch_size):
        losses.append(pretrain_step(kg, state, perm[lo:lo + batch_size], rng))
    return float(np.mean(losses))


def steps_per_epoch(kg, batch_size):
    return len(kg.entities) // batch_size


def make_state(kg, d, rng_init, rng_walk, critical_budget=-1, walks_per_node=2, n_layers=1,
               **kwargs):
    """Fresh query/key encoders over ``kg`` with critical nodes chosen by walk frequency."""
    if critical_budget < 0:
        critical = set(range(kg.n_entities))
    else:
        critical = select_critical_nodes(
            kg, (kwargs.get("hops", 128), kwargs.get("restart_p", 0.5), walks_per_node),
            critical_budget, rng_walk)
    query = encoder_store(kg.n_entities, kg.n_relations, d, critical, rng_init, n_layers)
    return ContrastiveState(query, critical, kg.n_entities, kg.n_relations, **kwargs)


def make_probe(kg, state, n, rng):
    """Fixed subgraph pairs for tracking progress independently of the queue."""
    ents = np.array(sorted(kg.entities), dtype=np.int64)
    starts = ents[rng.permutation(len(ents))[:n]]
    return ([sample_subgraph(kg, int(v), state.hops, state.restart_p, rng) for v in starts],
            [sample_subgraph(kg, int(v), state.hops, state.restart_p, rng) for v in starts])


def probe_loss(state, probe):
    """InfoNCE of each probe query against its key, the other probe keys acting
    as negatives; evaluated without touching gradients or the queue."""
    (q_table, q_rgcn), (k_table, k_rgcn) = state.encoders()
    q_inst, k_inst = probe
    with T.no_grad():
        q = encode_instances(q_inst, q_table, q_rgcn, state.n_relations).data
        k = encode_instances(k_inst, k_table, k_rgcn, state.n_relations).data
    logits = q @ k.T / state.tau
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return float(-np.mean(np.diag(logp)))


def pretrain(kg, state, epochs, batch_size, rng, on_epoch=None, probe=None):
    """Run ``epochs`` passes.

    Returns ``(train_losses, probe_losses)``; the probe list starts with the
    initial encoder and is empty when no probe is given.
    """
    state.total_steps = max(1, epochs * steps_per_epoch(kg, batch_size))
    curve = []
    probes = [probe_loss(state, probe)] if probe is not None else []
    for ep in range(epochs):
        loss = pretrain_epoch(kg, state, batch_size, rng)
        curve.append(loss)
        if probe is not None:
            probes.append(probe_loss(state, probe))
        if on_epoch:
            on_epoch(ep + 1, loss, probes[-1] if probes else None)
    return curve, probes


def encoder_checkpoint(state):
    """Query-encoder tensors only; the key encoder is discarded."""
    out = state.query.state_dict()
    out["emb.critical"] = np.asarray(state.critical, dtype=np.float64)
    return out
