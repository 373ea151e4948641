"""Interest-aware item recommender.

Historical items are refined by the session- and knowledge-hypergraph
convolutions, fused with the current-session entities by multi-head
attention, pooled into a user vector and scored against the catalogue.

Two routes compute the same scores: ``user_state``/``score_items`` follow one
example at a time and exist for clarity and testing; ``RecommenderModel.logits``
evaluates a padded mini-batch and is what training uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .corpus import UserHistory
from .hypergraph import (HConvParams, Hypergraph, build_knowledge_hypergraph,
                         build_session_hypergraph, extend_hyperedges,
                         knowledge_conv, pooling_matrix, session_conv)
from .kg import EmbeddingTable, RgcnParams, build_task_kg, rgcn_propagate
from .numeric import layers as L
from .numeric import tensor as T
from .numeric.optim import AdamState, adam_step
from .numeric.params import ParameterStore, glorot

METRIC_KS = (10, 50)


# -- single-example operations -------------------------------------------------
@dataclass
class UserState:
    N_C: T.Tensor
    N_S: T.Tensor
    N_K: T.Tensor
    N_SK: T.Tensor
    u: T.Tensor


def fuse_interest(N_C, N_S, N_K, attn_params, heads=1):
    """Current entities attend over the stacked session/knowledge item reps."""
    if N_C.shape[0] == 0:
        raise ValueError("no current-session entities to query with")
    parts = [x for x in (N_S, N_K) if x is not None and x.shape[0] > 0]
    if not parts:
        return T.Tensor(np.zeros((0, N_C.shape[1])))
    keys = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    return L.multi_head_attention(N_C, keys, keys, heads, attn_params)


def user_repr(N_SK, N_C):
    """Mean of ``[mean(N_SK); N_C]``, or of ``N_C`` alone when history is empty."""
    has_hist = N_SK is not None and N_SK.shape[0] > 0
    if N_C.shape[0] == 0:
        if not has_hist:
            raise ValueError("user representation needs current or historical rows")
        return N_SK.mean(axis=0)
    if not has_hist:
        return N_C.mean(axis=0)
    return T.concat([N_SK.mean(axis=0, keepdims=True), N_C], axis=0).mean(axis=0)


def score_items(u, item_table):
    if item_table.shape[0] == 0:
        raise ValueError("empty item set")
    if u.ndim == 1:
        return T.softmax(T.matmul(u.reshape(1, -1), T.swap_last(item_table)), axis=-1).reshape(-1)
    return T.softmax(T.matmul(u, T.swap_last(item_table)), axis=-1)


def rec_loss(P, targets):
    """Mean categorical cross-entropy ``-(1/B) sum_j log P_j(y_j)``."""
    P = T.as_tensor(P)
    if P.ndim == 1:
        P = P.reshape(1, -1)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if np.any(targets < 0) or np.any(targets >= P.shape[1]):
        raise ValueError("target index out of range")
    picked = P[np.arange(len(targets)), targets]
    return -(T.log(picked).mean())


def rec_loss_from_logits(logits, targets):
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise ValueError("target index out of range")
    logp = T.log_softmax(logits, axis=1)
    return -(logp[np.arange(len(targets)), targets].mean())


# -- metrics ---------------------------------------------------------------------
def rank_items(scores, catalogue):
    """Catalogue ids ordered by descending score (ties to the lower position)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return [catalogue[i] for i in order]


def evaluate(rankings, targets, ks=METRIC_KS):
    """Recall@K, MRR@K and NDCG@K with one relevant item per example."""
    out = {}
    n = len(targets)
    ranks = []
    for ranked, y in zip(rankings, targets):
        ranked = list(ranked)
        ranks.append(ranked.index(y) + 1 if y in ranked else math.inf)
    for k in ks:
        rec = mrr = ndcg = 0.0
        for r in ranks:
            if r <= k:
                rec += 1.0
                mrr += 1.0 / r
                ndcg += 1.0 / math.log2(r + 1)
        out[f"recall@{k}"] = rec / n if n else 0.0
        out[f"mrr@{k}"] = mrr / n if n else 0.0
        out[f"ndcg@{k}"] = ndcg / n if n else 0.0
    return out


# -- examples --------------------------------------------------------------------
@dataclass(frozen=True)
class RecExample:
    session_id: str
    user_id: str
    turn: int
    context_entities: tuple
    context_items: tuple
    history: UserHistory
    target: int


def build_examples(corpus, session_ids, history_cap=10):
    """One example per item in each system turn, with the entities mentioned
    earlier in the session as context. Turns without prior entities are skipped."""
    out = []
    for sid in session_ids:
        sess = corpus.session(sid)
        hist = corpus.history(sid, history_cap)
        ents, items = [], []
        for t, utt in enumerate(sess.utterances):
            if utt.speaker == "system" and utt.items and ents:
                for y in utt.items:
                    out.append(RecExample(sid, sess.user_id, t, tuple(sorted(set(ents))),
                                          tuple(sorted(set(items))), hist, y))
            ents.extend(utt.entities)
            items.extend(utt.items)
    return out


@dataclass
class Prepared:
    """Constant per-example structures for the batched forward pass."""

    example: RecExample
    ctx: np.ndarray
    n_hist: int
    s_vertices: np.ndarray
    s_prop: np.ndarray
    s_rows: np.ndarray
    k_vertices: np.ndarray
    k_prop: np.ndarray
    k_pool: np.ndarray
    target_index: int
    session_hg: Hypergraph = None


# -- model -----------------------------------------------------------------------
class RecommenderModel:
    def __init__(self, task_kg, catalogue, config, rng=None, pretrained=None):
        self.kg = task_kg
        self.catalogue = sorted(int(i) for i in catalogue)
        self.catalogue_index = {i: k for k, i in enumerate(self.catalogue)}
        self.cfg = config
        rng = rng if rng is not None else config.rng("init")
        d = config.d_rec
        n_ent = task_kg.n_entities
        store = ParameterStore()
        if pretrained is not None:
            critical = sorted(int(c) for c in pretrained.get("emb.critical", np.arange(n_ent)))
            if pretrained["emb.table"].shape[1] != d:
                raise ValueError("pretrained embedding dim differs from d_rec")
        else:
            budget = config.critical_budget
            critical = list(range(n_ent)) if budget < 0 else sorted(_critical(task_kg, config, budget))
        self.critical = critical
        table = EmbeddingTable.init(n_ent, critical, d, rng)
        store.add("emb.table", table.table)
        for name, t in RgcnParams.init(task_kg.n_relations, d, rng, config.rgcn_layers).named().items():
            store.add(name, t)
        for path in ("session", "knowledge"):
            for li in range(config.hconv_layers):
                store.add(f"hconv.{path}.w{li}", glorot(rng, d, d))
        L.init_mha(store, "fuse", d, rng)
        if pretrained is not None:
            for name, arr in pretrained.items():
                if name in store:
                    if store[name].data.shape != arr.shape:
                        raise ValueError(f"pretrained tensor {name} has shape {arr.shape}")
                    store[name].data[...] = arr
        self.store = store
        self._adj = task_kg.adjacency()

    # parameter views
    @property
    def table(self):
        return EmbeddingTable(self.kg.n_entities, self.critical, self.store["emb.table"])

    @property
    def rgcn(self):
        return RgcnParams.from_named({n: t for n, t in self.store.items() if n.startswith("rgcn.")})

    def hconv_params(self, path):
        return HConvParams([self.store[f"hconv.{path}.w{li}"] for li in range(self.cfg.hconv_layers)])

    @property
    def attn(self):
        return self.store.scope("fuse")

    def entity_embeddings(self):
        return rgcn_propagate(self._adj, self.table.lookup(), self.rgcn)

    def state_dict(self):
        out = self.store.state_dict()
        out["emb.critical"] = np.asarray(self.critical, dtype=np.float64)
        return out

    def load_state_dict(self, state):
        st = {k: v for k, v in state.items() if k in self.store}
        self.store.load_state_dict(st)

    # preparation
    def session_hypergraph(self, ex, collection=None):
        hg, _ = build_session_hypergraph(ex.history)
        if collection is not None and self.cfg.use_extension:
            own = {s.session_id for s in ex.history.sessions} | {ex.session_id}
            skip = own | {sid for sid, _, uid in collection if uid == ex.user_id}
            hg = extend_hyperedges(ex.context_items, [(sid, its) for sid, its, _ in collection],
                                   hg, self.cfg.ext_gamma, self.cfg.ext_k_max, exclude=skip)
        return hg

    def prepare(self, ex, collection=None):
        hist_items = sorted(ex.history.item_set)
        n = len(hist_items)
        empty = np.zeros((0, 0))
        s_vertices = k_vertices = np.zeros(0, dtype=np.int64)
        s_prop = k_prop = k_pool = empty
        s_rows = np.zeros(0, dtype=np.int64)
        hg = None
        if n:
            hg = self.session_hypergraph(ex, collection)
            s_vertices = np.asarray(hg.vertices, dtype=np.int64)
            s_prop = hg.propagation()
            s_rows = np.array([hg.index[i] for i in hist_items], dtype=np.int64)
            khg, _ = build_knowledge_hypergraph(ex.history, self.kg, self.cfg.n_hops)
            k_vertices = np.asarray(khg.vertices, dtype=np.int64)
            k_prop = khg.propagation()
            k_pool = pooling_matrix(khg)
        if ex.target not in self.catalogue_index:
            raise ValueError(f"target {ex.target} is not a catalogue item")
        return Prepared(ex, np.asarray(ex.context_entities, dtype=np.int64), n, s_vertices,
                        s_prop, s_rows, k_vertices, k_prop, k_pool,
                        self.catalogue_index[ex.target], hg)

    # reference route
    def user_state(self, prep, N=None):
        N = self.entity_embeddings() if N is None else N
        ex = prep.example
        N_C = N[prep.ctx]
        d = N.shape[1]
        N_S = N_K = T.Tensor(np.zeros((0, d)))
        if prep.n_hist:
            if self.cfg.use_session_hypergraph:
                N_S = session_conv(ex.history, N, self.hconv_params("session"), hg=prep.session_hg)
            if self.cfg.use_knowledge_hypergraph:
                N_K = knowledge_conv(ex.history, self.kg, N, self.hconv_params("knowledge"),
                                     self.cfg.n_hops)
        N_SK = fuse_interest(N_C, N_S, N_K, self.attn, self.cfg.rec_heads)
        return UserState(N_C, N_S, N_K, N_SK, user_repr(N_SK, N_C))

    def item_table(self, N):
        return N[np.asarray(self.catalogue, dtype=np.int64)]

    # batched route
    def logits(self, batch, N=None):
        N = self.entity_embeddings() if N is None else N
        d = N.shape[1]
        B = len(batch)
        hist = np.array([p.n_hist for p in batch])
        paths = []
        if hist.any():
            if self.cfg.use_session_hypergraph:
                paths.append(self._session_rows(batch, N))
            if self.cfg.use_knowledge_hypergraph:
                paths.append(self._knowledge_rows(batch, N))
        qlen = np.array([len(p.ctx) for p in batch])
        if np.any(qlen == 0):
            raise ValueError("example without current-session entities")
        qmax = int(qlen.max())
        qidx = np.zeros((B, qmax), dtype=np.int64)
        qmask = np.zeros((B, qmax))
        for j, p in enumerate(batch):
            qidx[j, :len(p.ctx)] = p.ctx
            qmask[j, :len(p.ctx)] = 1.0
        Q = N[qidx]
        sum_c = (Q * qmask[:, :, None]).sum(axis=1)
        if paths:
            keys, kidx, kmask = self._pad_keys(batch, paths, d)
            K = keys[kidx]
            nsk = L.multi_head_attention(Q, K, K, self.cfg.rec_heads, self.attn, key_mask=kmask)
            has = (hist > 0).astype(float)
            w = qmask / qlen[:, None] * has[:, None]
            pooled = (nsk * w[:, :, None]).sum(axis=1)
            u = (pooled + sum_c) * (1.0 / (qlen + has))[:, None]
        else:
            u = sum_c * (1.0 / qlen)[:, None]
        return T.matmul(u, T.swap_last(self.item_table(N)))

    def _session_rows(self, batch, N):
        verts = [p.s_vertices for p in batch]
        X = N[np.concatenate(verts)]
        P = sp.block_diag([p.s_prop for p in batch if p.n_hist], format="csr")
        for W in self.hconv_params("session").weights:
            X = T.matmul(T.sparse_matmul(P, X), W)
        rows, off = [], 0
        for p in batch:
            rows.append(p.s_rows + off)
            off += len(p.s_vertices)
        return X[np.concatenate(rows)]

    def _knowledge_rows(self, batch, N):
        X = N[np.concatenate([p.k_vertices for p in batch])]
        live = [p for p in batch if p.n_hist]
        P = sp.block_diag([p.k_prop for p in live], format="csr")
        for W in self.hconv_params("knowledge").weights:
            X = T.matmul(T.sparse_matmul(P, X), W)
        Qp = sp.block_diag([p.k_pool for p in live], format="csr")
        return T.sparse_matmul(Qp, X)

    def _pad_keys(self, batch, paths, d):
        total = sum(p.n_hist for p in batch)
        keys = T.concat(paths + [T.Tensor(np.zeros((1, d)))], axis=0)
        pad = len(paths) * total
        kmax = max(1, len(paths) * max(p.n_hist for p in batch))
        kidx = np.full((len(batch), kmax), pad, dtype=np.int64)
        kmask = np.zeros((len(batch), kmax), dtype=bool)
        off = 0
        for j, p in enumerate(batch):
            cols = []
            for pi in range(len(paths)):
                cols.extend(range(pi * total + off, pi * total + off + p.n_hist))
            kidx[j, :len(cols)] = cols
            kmask[j, :len(cols)] = True
            off += p.n_hist
        return keys, kidx, kmask

    def loss(self, batch):
        return rec_loss_from_logits(self.logits(batch), [p.target_index for p in batch])

    def score(self, prepared, batch_size=256):
        with T.no_grad():
            N = self.entity_embeddings()
            out = [self.logits(prepared[i:i + batch_size], N).data
                   for i in range(0, len(prepared), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, len(self.catalogue)))

    def metrics(self, prepared, ks=METRIC_KS, batch_size=256):
        if not prepared:
            return {f"{m}@{k}": 0.0 for k in ks for m in ("recall", "mrr", "ndcg")}
        scores = self.score(prepared, batch_size)
        rankings = [rank_items(s, self.catalogue) for s in scores]
        return evaluate(rankings, [p.example.target for p in prepared], ks)


def _critical(kg, config, budget):
    from .kg import select_critical_nodes

    return select_critical_nodes(kg, (config.walk_hops, config.restart_p, config.critical_walks),
                                 budget, config.rng("walk"))


def train_collection(corpus, session_ids):
    return [(sid, corpus.session(sid).item_set(), corpus.session(sid).user_id)
            for sid in sorted(session_ids)]


@dataclass
class TrainResult:
    model: RecommenderModel
    history: list
    best_epoch: int
    best_state: dict


def train_recommender(corpus, kg, config, train_ids, valid_ids=(), pretrained=None,
                      epochs=None, select_metric="recall@10", ks=METRIC_KS, on_epoch=None,
                      eval_train=False):
    """Train on ``train_ids`` sessions, evaluating ``valid_ids`` after each epoch.

    History entries hold ``epoch``, ``loss`` and ``valid/<metric>`` values
    (plus ``train/<metric>`` when ``eval_train``). Epoch 0 is the
    initialised model. The returned ``best_state`` is the parameter snapshot
    with the highest validation ``select_metric`` (earliest on ties).
    """
    epochs = config.rec_epochs if epochs is None else epochs
    task_kg = build_task_kg(kg, corpus, config.task_kg_hops)
    model = RecommenderModel(task_kg, kg.items, config, pretrained=pretrained)
    coll = train_collection(corpus, train_ids)
    train = [model.prepare(ex, coll) for ex in build_examples(corpus, train_ids, config.history_cap)]
    valid = [model.prepare(ex, coll) for ex in build_examples(corpus, valid_ids, config.history_cap)]
    if not train:
        raise ValueError("no training examples")
    adam = AdamState(lr=config.lr)
    shuffle = config.rng("shuffle")

    def record(epoch, loss):
        row = {"epoch": epoch, "loss": loss}
        for k, v in model.metrics(valid, ks).items():
            row[f"valid/{k}"] = v
        if eval_train:
            for k, v in model.metrics(train, ks).items():
                row[f"train/{k}"] = v
        return row

    history = [record(0, None)]
    best_epoch, best_val = 0, history[0].get(f"valid/{select_metric}", 0.0)
    best_state = model.state_dict()
    if on_epoch:
        on_epoch(history[0])
    bs = config.rec_batch_size
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(len(train))
        total = 0.0
        for lo in range(0, len(order), bs):
            batch = [train[i] for i in order[lo:lo + bs]]
            model.store.zero_grad()
            loss = model.loss(batch)
            T.backward(loss)
            adam_step(model.store, adam)
            total += loss.item() * len(batch)
        row = record(epoch, total / len(train))
        history.append(row)
        val = row.get(f"valid/{select_metric}", 0.0)
        if val > best_val:
            best_epoch, best_val = epoch, val
            best_state = model.state_dict()
        if on_epoch:
            on_epoch(row)
    return TrainResult(model, history, best_epoch, best_state)


def prepare_split(model, corpus, session_ids, collection, history_cap=10):
    return [model.prepare(ex, collection) for ex in build_examples(corpus, session_ids, history_cap)]
