"""Knowledge-graph store, task/extended KG construction, the relational GCN
encoder and the critical-node embedding table."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .numeric import tensor as T
from .numeric.params import glorot


class KGError(ValueError):
    pass


class KnowledgeGraph:
    """Typed triplets ``(head, relation, tail)`` over global entity ids.

    ``entities`` is the vertex set of this graph (a subgraph keeps the global
    id space but a smaller vertex set).
    """

    def __init__(self, n_entities, n_relations, triplets=(), items=(), entities=None,
                 relation_names=None):
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)
        raw = [(int(h), int(r), int(t)) for h, r, t in triplets]
        trip = sorted(set(raw))
        if len(trip) != len(raw):
            raise KGError("duplicate triplets")
        for h, r, t in trip:
            if not (0 <= h < self.n_entities and 0 <= t < self.n_entities):
                raise KGError(f"triplet endpoint out of range: {(h, r, t)}")
            if not 0 <= r < self.n_relations:
                raise KGError(f"relation out of range: {(h, r, t)}")
        self.triplets = np.array(trip, dtype=np.int64).reshape(-1, 3)
        self.items = frozenset(int(i) for i in items)
        if entities is None:
            entities = range(self.n_entities)
        self.entities = frozenset(int(e) for e in entities)
        self.relation_names = list(relation_names) if relation_names else None
        self._nbrs = None
        self._adj_cache = {}

    def __repr__(self):
        return (f"KnowledgeGraph(|E|={len(self.entities)}, |R|={self.n_relations}, "
                f"triplets={len(self.triplets)})")

    def __eq__(self, other):
        return (isinstance(other, KnowledgeGraph) and self.n_entities == other.n_entities
                and self.n_relations == other.n_relations and self.items == other.items
                and self.entities == other.entities
                and np.array_equal(self.triplets, other.triplets))

    @property
    def relations_used(self):
        return sorted({int(r) for r in self.triplets[:, 1]})

    def neighbours(self, e):
        """Undirected neighbours of ``e``."""
        if self._nbrs is None:
            nb = {}
            for h, _, t in self.triplets:
                nb.setdefault(int(h), set()).add(int(t))
                nb.setdefault(int(t), set()).add(int(h))
            self._nbrs = {k: sorted(v) for k, v in nb.items()}
        return self._nbrs.get(e, [])

    def n_hop(self, seeds, hops):
        """Vertices within ``hops`` undirected steps of any seed (seeds included)."""
        seen = {s for s in seeds}
        frontier = deque((s, 0) for s in sorted(seen))
        while frontier:
            v, d = frontier.popleft()
            if d == hops:
                continue
            for n in self.neighbours(v):
                if n not in seen:
                    seen.add(n)
                    frontier.append((n, d + 1))
        return seen

    def induced(self, vertices):
        vs = set(vertices)
        keep = [tuple(t) for t in self.triplets if t[0] in vs and t[2] in vs]
        return KnowledgeGraph(self.n_entities, self.n_relations, keep,
                              items=self.items & vs, entities=vs,
                              relation_names=self.relation_names)

    def adjacency(self, n_rows=None):
        """Per-relation message matrices including inverse relations.

        Entry ``[i, j]`` of matrix ``r`` is 1 when ``j -r-> i``; matrix
        ``r + R`` holds the reversed edges. Returns ``{rel_id: csr}`` for the
        relation ids that actually occur.
        """
        n = n_rows or self.n_entities
        key = n
        if key not in self._adj_cache:
            out = {}
            R = self.n_relations
            for r in self.relations_used:
                sel = self.triplets[self.triplets[:, 1] == r]
                ones = np.ones(len(sel))
                out[r] = sp.csr_matrix((ones, (sel[:, 2], sel[:, 0])), shape=(n, n))
                out[r + R] = sp.csr_matrix((ones, (sel[:, 0], sel[:, 2])), shape=(n, n))
            self._adj_cache[key] = out
        return self._adj_cache[key]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for h, r, t in self.triplets:
                fh.write(json.dumps({"h": int(h), "r": int(r), "t": int(t)}) + "\n")


def load_kg(kg_path, relations_path=None, items_path=None, n_entities=None):
    triplets = []
    with open(kg_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                triplets.append((int(row["h"]), int(row["r"]), int(row["t"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise KGError(f"{kg_path}: line {lineno}: malformed triplet") from None
    if len(set(triplets)) != len(triplets):
        raise KGError("duplicate triplets")
    names = None
    if relations_path:
        rows = []
        with open(relations_path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        rows.sort(key=lambda r: r["id"])
        names = [r["name"] for r in rows]
    items = []
    if items_path:
        with open(items_path, encoding="utf-8") as fh:
            items = [int(line) for line in fh if line.strip()]
    n_rel = len(names) if names else 1 + max((r for _, r, _ in triplets), default=-1)
    top = max([max(h, t) for h, _, t in triplets] + items + [-1]) + 1
    n_ent = n_entities if n_entities is not None else top
    if n_ent < top:
        raise KGError("entity id beyond declared entity count")
    return KnowledgeGraph(n_ent, n_rel, triplets, items=items, relation_names=names)


def save_relations(path, kg):
    names = kg.relation_names or [f"r{i}" for i in range(kg.n_relations)]
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(names):
            fh.write(json.dumps({"id": i, "name": name}) + "\n")


def save_items(path, kg):
    with open(path, "w", encoding="utf-8") as fh:
        for i in sorted(kg.items):
            fh.write(f"{i}\n")


def mentioned_entities(corpus):
    return {e for s in corpus for u in s.utterances for e in u.entities}


def build_task_kg(kg, corpus, hops=2):
    """Mentioned entities plus everything within ``hops`` of them, with induced edges."""
    seeds = mentioned_entities(corpus)
    for e in seeds:
        if not 0 <= e < kg.n_entities:
            raise KGError(f"corpus entity {e} not in KG")
    if not seeds:
        return KnowledgeGraph(kg.n_entities, kg.n_relations, (), entities=(),
                              relation_names=kg.relation_names)
    return kg.induced(kg.n_hop(seeds, hops))


def build_extended_kg(kg, relation_whitelist):
    """Keep whitelisted-relation triplets and the vertices they span."""
    wl = set(int(r) for r in relation_whitelist)
    if not wl <= set(range(kg.n_relations)):
        raise KGError("whitelist names unknown relations")
    keep = [tuple(t) for t in kg.triplets if int(t[1]) in wl]
    ents = {int(t[0]) for t in keep} | {int(t[2]) for t in keep}
    return KnowledgeGraph(kg.n_entities, kg.n_relations, keep, items=kg.items & ents,
                          entities=ents, relation_names=kg.relation_names)


# -- embedding table -------------------------------------------------------
class EmbeddingTable:
    """Rows for critical entities; every other entity shares the UNKNOWN row 0."""

    def __init__(self, n_entities, critical, table):
        self.n_entities = n_entities
        self.critical = sorted(int(c) for c in critical)
        self.row_of = np.zeros(n_entities, dtype=np.int64)
        self.row_of[self.critical] = np.arange(1, len(self.critical) + 1)
        if table.shape[0] != len(self.critical) + 1:
            raise KGError("table rows must be critical count + 1")
        self.table = table

    @classmethod
    def init(cls, n_entities, critical, d, rng):
        crit = sorted(critical)
        data = rng.normal(0.0, 1.0 / np.sqrt(d), size=(len(crit) + 1, d))
        return cls(n_entities, crit, T.Tensor(data, requires_grad=True))

    @property
    def dim(self):
        return self.table.shape[1]

    def lookup(self, entity_ids=None):
        rows = self.row_of if entity_ids is None else self.row_of[np.asarray(entity_ids, dtype=np.int64)]
        return self.table[rows]


@dataclass
class RgcnParams:
    """``layers[l] = (theta0, {relation_id: theta_r})``."""

    layers: list

    @classmethod
    def init(cls, n_relations, d, rng, n_layers=1):
        layers = []
        for _ in range(n_layers):
            theta0 = T.Tensor(glorot(rng, d, d), requires_grad=True)
            thetas = {r: T.Tensor(glorot(rng, d, d), requires_grad=True)
                      for r in range(2 * n_relations)}
            layers.append((theta0, thetas))
        return cls(layers)

    def named(self):
        out = {}
        for li, (theta0, thetas) in enumerate(self.layers):
            pre = "rgcn." if li == 0 else f"rgcn.l{li}."
            out[pre + "theta0"] = theta0
            for r, th in thetas.items():
                out[f"{pre}theta_r.{r}"] = th
        return out

    @classmethod
    def from_named(cls, tensors):
        layers = []
        li = 0
        while True:
            pre = "rgcn." if li == 0 else f"rgcn.l{li}."
            if pre + "theta0" not in tensors:
                break
            thetas = {}
            for name, t in tensors.items():
                if name.startswith(pre + "theta_r."):
                    thetas[int(name[len(pre + "theta_r."):])] = t
            layers.append((tensors[pre + "theta0"], dict(sorted(thetas.items()))))
            li += 1
        if not layers:
            raise KGError("no R-GCN parameters found")
        return cls(layers)


def rgcn_propagate(adjacency, X, params):
    """``h_i <- h_i Theta_0 + sum_r sum_{j in N_r(i)} h_j Theta_r`` per layer.

    ``adjacency`` maps relation id to a constant sparse message matrix over
    the rows of ``X``; the normalisation constant is 1 and no nonlinearity
    is applied between layers.
    """
    for theta0, thetas in params.layers:
        out = T.matmul(X, theta0)
        for r in sorted(adjacency):
            A = adjacency[r]
            if A.nnz == 0:
                continue
            if r not in thetas:
                raise KGError(f"no weight for relation {r}")
            out = out + T.matmul(T.sparse_matmul(A, X), thetas[r])
        X = out
    return X


def rgcn_encode(kg, params, base):
    """Encode every entity of the global id space over ``kg``'s edges.

    ``base`` is either an ``EmbeddingTable`` or an ``|E| x d`` tensor.
    """
    X = base.lookup() if isinstance(base, EmbeddingTable) else base
    if X.shape[0] != kg.n_entities:
        raise KGError("base embeddings do not cover the entity space")
    theta0 = params.layers[0][0]
    if X.shape[1] != theta0.shape[0]:
        raise KGError("embedding dim does not match R-GCN weights")
    return rgcn_propagate(kg.adjacency(), X, params)


# -- critical nodes --------------------------------------------------------
def visit_counts(kg, hops, restart_p, walks_per_node, rng):
    """Random-walk-with-restart visit frequency per entity."""
    from .pretrain import random_walk

    counts = np.zeros(kg.n_entities, dtype=np.int64)
    for v in sorted(kg.entities):
        for _ in range(walks_per_node):
            for x in random_walk(kg, v, hops, restart_p, rng):
                counts[x] += 1
    return counts


def select_critical_nodes(kg, walk_params, budget, rng=None):
    """The ``budget`` most frequently visited entities (ties to the lower id).

    ``walk_params`` is ``(hops, restart_p, walks_per_node)``.
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    if budget == 0:
        return set()
    if budget >= len(kg.entities):
        return set(kg.entities)
    hops, restart_p, walks = walk_params
    rng = rng if rng is not None else np.random.default_rng(0)
    counts = visit_counts(kg, hops, restart_p, walks, rng)
    ents = sorted(kg.entities)
    ranked = sorted(ents, key=lambda e: (-counts[e], e))
    return set(ranked[:budget])
