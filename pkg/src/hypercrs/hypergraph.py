"""Session- and knowledge-based hypergraphs over a user's history and the
normalised vertex-hyperedge-vertex convolution."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numeric import tensor as T
from .numeric.params import glorot


class Hypergraph:
    """Incidence structure with cached degrees.

    Vertices are entity ids kept in ascending order; ``hyperedges`` is a list
    of vertex-id frozensets. Empty hyperedges are dropped on construction.
    """

    def __init__(self, hyperedges, labels=None):
        edges = []
        labs = []
        for i, e in enumerate(hyperedges):
            e = frozenset(int(v) for v in e)
            if e:
                edges.append(e)
                labs.append(labels[i] if labels is not None else i)
        self.hyperedges = edges
        self.labels = labs
        self.vertices = sorted(set().union(*edges)) if edges else []
        self.index = {v: i for i, v in enumerate(self.vertices)}
        H = np.zeros((len(self.vertices), len(edges)))
        for j, e in enumerate(edges):
            for v in e:
                H[self.index[v], j] = 1.0
        self.H = H
        self._prop = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_edges(self):
        return len(self.hyperedges)

    @property
    def vertex_degree(self):
        return self.H.sum(axis=1)

    @property
    def edge_degree(self):
        return self.H.sum(axis=0)

    @property
    def D(self):
        return np.diag(self.vertex_degree)

    @property
    def B(self):
        return np.diag(self.edge_degree)

    def propagation(self):
        """``D^-1 H B^-1 H^T`` as a dense array."""
        if self._prop is None:
            d = self.vertex_degree
            if np.any(d == 0):
                raise ValueError("hypergraph has a zero-degree vertex")
            b = self.edge_degree
            self._prop = (self.H / d[:, None]) @ (self.H / b[None, :]).T
        return self._prop

    def with_extra_edges(self, extra, labels=None):
        return Hypergraph(self.hyperedges + list(extra),
                          self.labels + list(labels if labels is not None else
                                             range(self.n_edges, self.n_edges + len(extra))))


@dataclass
class HConvParams:
    weights: list = field(default_factory=list)

    @classmethod
    def init(cls, d, rng, n_layers=1):
        return cls([T.Tensor(glorot(rng, d, d), requires_grad=True) for _ in range(n_layers)])

    @classmethod
    def identity(cls, d, n_layers=1):
        return cls([T.Tensor(np.eye(d)) for _ in range(n_layers)])


def hconv(hg, X, params):
    """``X <- D^-1 H B^-1 H^T X W`` for each layer, no activation."""
    if X.shape[0] != hg.n_vertices:
        raise ValueError("feature rows must align with hypergraph vertices")
    P = hg.propagation()
    for W in params.weights:
        X = T.matmul(T.sparse_matmul(P, X), W)
    return X


# -- builders ----------------------------------------------------------------
def build_session_hypergraph(history):
    """One hyperedge per historical session holding its items.

    Returns ``(hg, vertex_items)`` where ``vertex_items[i]`` is the item id of
    vertex ``i``.
    """
    edges = [s.item_set() for s in history.sessions]
    labels = [s.session_id for s in history.sessions]
    hg = Hypergraph(edges, labels)
    return hg, list(hg.vertices)


def build_knowledge_hypergraph(history, kg, n_hops=1):
    """One hyperedge per historical item: the item and its ``n_hops`` KG neighbourhood.

    Returns ``(hg, edge_items)`` with ``edge_items[j]`` the item behind hyperedge ``j``.
    """
    items = sorted(history.item_set)
    edges = [kg.n_hop([i], n_hops) for i in items]
    return Hypergraph(edges, items), items


def _gather(embeddings, ids):
    return embeddings[np.asarray(ids, dtype=np.int64)]


def session_conv(history, embeddings, params, hg=None):
    """Session-hypergraph convolution; rows follow the sorted historical item set.

    ``hg`` may be a pre-built (e.g. extended) session hypergraph whose
    vertex set contains the historical items.
    """
    items = sorted(history.item_set)
    if not items:
        return T.Tensor(np.zeros((0, embeddings.shape[1])))
    if hg is None:
        hg, _ = build_session_hypergraph(history)
    out = hconv(hg, _gather(embeddings, hg.vertices), params)
    if hg.vertices == items:
        return out
    return out[np.array([hg.index[i] for i in items])]


def pooling_matrix(hg):
    """Row ``j`` averages the vertices of hyperedge ``j``."""
    Q = hg.H.T.copy()
    Q /= Q.sum(axis=1, keepdims=True)
    return Q


def knowledge_conv(history, kg, embeddings, params, n_hops=1):
    """Knowledge-hypergraph convolution followed by per-hyperedge mean pooling."""
    items = sorted(history.item_set)
    if not items:
        return T.Tensor(np.zeros((0, embeddings.shape[1])))
    hg, edge_items = build_knowledge_hypergraph(history, kg, n_hops)
    conv = hconv(hg, _gather(embeddings, hg.vertices), params)
    return T.sparse_matmul(pooling_matrix(hg), conv)


# -- extension ---------------------------------------------------------------
def jaccard(a, b):
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def extension_size(n_edges, gamma=1.0, k_max=10):
    if n_edges == 0:
        return 0
    return min(k_max, int(math.ceil(gamma * n_edges)))


def extend_hyperedges(current_items, collection, hg, gamma=1.0, k_max=10, exclude=()):
    """Append the most similar collection hyperedges to ``hg``.

    ``collection`` is a sequence of ``(session_id, item_set)``. Candidates are
    ranked by Jaccard overlap with ``current_items`` (ties to the lower
    session id); only candidates sharing at least one item qualify, and
    sessions in ``exclude`` are skipped.
    """
    cur = set(current_items)
    k = extension_size(hg.n_edges, gamma, k_max)
    if not cur or k == 0:
        return hg
    skip = set(exclude)
    scored = []
    for sid, items in collection:
        if sid in skip or not items:
            continue
        j = jaccard(cur, items)
        if j > 0:
            scored.append((-j, sid, frozenset(items)))
    scored.sort(key=lambda x: (x[0], x[1]))
    chosen = scored[:k]
    if not chosen:
        return hg
    return hg.with_extra_edges([c[2] for c in chosen], [c[1] for c in chosen])
