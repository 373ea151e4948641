"""Response generator: two dialogue encoders, a decoder whose layers attend
over the fused historical item reps, the current dialogue and the history
(mixed by ``beta``), and an output layer with user and copy biases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import truncate_context
from .numeric import layers as L
from .numeric import tensor as T
from .numeric.optim import AdamState, adam_step
from .numeric.params import ParameterStore, glorot


def sub(p, prefix):
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}


@dataclass
class GenContext:
    X_C: T.Tensor
    X_H: T.Tensor = None
    N_SK: T.Tensor = None
    u: T.Tensor = None
    beta: float = 0.9


# -- blocks ---------------------------------------------------------------------
def encoder_layer(x, p, heads):
    a = L.layer_norm(x + L.multi_head_attention(x, x, x, heads, sub(p, "attn")), sub(p, "ln1"))
    return L.layer_norm(a + L.feed_forward(a, sub(p, "ffn")), sub(p, "ln2"))


def encode_dialogue(tokens, tok_emb, layer_params, heads):
    """Token embeddings plus sinusoidal positions through the encoder stack.

    An empty token list yields a zero-row matrix.
    """
    d = tok_emb.shape[1]
    toks = np.asarray(tokens, dtype=np.int64)
    if len(toks) == 0:
        return T.Tensor(np.zeros((0, d)))
    if toks.min() < 0 or toks.max() >= tok_emb.shape[0]:
        raise ValueError("token id out of vocabulary")
    x = tok_emb[toks] + L.sinusoid_positions(len(toks), d)
    for p in layer_params:
        x = encoder_layer(x, p, heads)
    return x


def _has_rows(x):
    return x is not None and x.shape[0] > 0


def decoder_layer(R_prev, ctx, p, heads):
    """Self-attention, cross-attention over N_SK, then over the current and
    historical dialogue encodings mixed by ``ctx.beta``, then feed-forward.

    Residual connections and layer norms wrap each sub-layer. With
    ``beta == 1`` or no history the historical branch is never evaluated.
    """
    if not _has_rows(ctx.X_C):
        raise ValueError("decoder needs a non-empty current-dialogue encoding")
    n = R_prev.shape[0]
    A0 = L.layer_norm(R_prev + L.multi_head_attention(R_prev, R_prev, R_prev, heads, sub(p, "self"),
                                                      attn_mask=L.causal_mask(n)), sub(p, "ln0"))
    if _has_rows(ctx.N_SK):
        A1 = L.layer_norm(A0 + L.multi_head_attention(A0, ctx.N_SK, ctx.N_SK, heads, sub(p, "nsk")),
                          sub(p, "ln1"))
    else:
        A1 = A0
    A2 = L.layer_norm(A1 + L.multi_head_attention(A1, ctx.X_C, ctx.X_C, heads, sub(p, "cur")),
                      sub(p, "ln2"))
    if ctx.beta == 1.0 or not _has_rows(ctx.X_H):
        A4 = A2
    else:
        A3 = L.layer_norm(A1 + L.multi_head_attention(A1, ctx.X_H, ctx.X_H, heads, sub(p, "hist")),
                          sub(p, "ln3"))
        A4 = A2 * ctx.beta + A3 * (1.0 - ctx.beta)
    return L.layer_norm(A4 + L.feed_forward(A4, sub(p, "ffn")), sub(p, "ln4"))


def output_logits(R, u, p, item_mask, use_user_bias=True, use_copy=True):
    """Logit-space sum of the decoder, user-interest and copy terms.

    ``p`` holds ``out.*``, ``user_bias.*``, ``user_proj.*``, ``copy.w`` and
    ``tok_emb``. The copy term is exactly zero on non-item tokens.
    """
    logits = L.linear(R, sub(p, "out"))
    if u is not None and u.ndim == 1:
        u = u.reshape(1, -1)
    if u is not None and use_user_bias:
        logits = logits + L.linear(u, sub(p, "user_bias"))
    if u is not None and use_copy:
        if not np.any(item_mask):
            raise ValueError("copy mechanism enabled with an empty item vocabulary")
        key = T.matmul(R, p["copy.w"]) * L.linear(u, sub(p, "user_proj"))
        copy = T.matmul(key, T.swap_last(p["tok_emb"])) * item_mask.astype(float)
        logits = logits + copy
    return logits


def generate_step(R_i, u, p, item_mask, use_user_bias=True, use_copy=True):
    """Next-token distribution for decoder state(s) ``R_i``."""
    return T.softmax(output_logits(R_i, u, p, item_mask, use_user_bias, use_copy), axis=-1)


def gen_loss(logits, targets):
    """``-sum_t log P(y_t | y_<t)`` per sequence, averaged over the batch.

    ``logits`` is a list of ``(T_b, V)`` tensors and ``targets`` the matching
    token lists.
    """
    if not logits:
        raise ValueError("empty batch")
    total = None
    for lg, y in zip(logits, targets):
        y = np.asarray(y, dtype=np.int64)
        if len(y) == 0:
            raise ValueError("zero-length target sequence")
        lp = T.log_softmax(lg, axis=-1)
        term = -(lp[np.arange(len(y)), y].sum())
        total = term if total is None else total + term
    return total * (1.0 / len(logits))


def distinct_n(responses, n):
    """Distinct n-grams over all responses divided by the number of responses."""
    if not responses:
        return 0.0
    grams = set()
    for r in responses:
        r = list(r)
        for i in range(len(r) - n + 1):
            grams.add(tuple(r[i:i + n]))
    return len(grams) / len(responses)


# -- model ----------------------------------------------------------------------
@dataclass
class ConvExample:
    session_id: str
    turn: int
    current: list
    history: list
    response: list
    N_SK: np.ndarray
    u: np.ndarray


class ConversationModel:
    def __init__(self, vocab, item_mask, config, rng=None):
        self.vocab = vocab
        self.item_mask = np.asarray(item_mask, dtype=bool)
        self.cfg = config
        rng = rng if rng is not None else config.rng("init")
        d, V, hid = config.d_conv, len(vocab), config.d_conv * config.ffn_mult
        s = ParameterStore()
        s.add("tok_emb", rng.normal(0.0, d ** -0.5, size=(V, d)))
        encoders = ["enc_cur"] + (["enc_hist"] if config.use_history_encoder else [])
        for enc in encoders:
            for li in range(config.enc_layers):
                pre = f"{enc}.{li}"
                L.init_mha(s, f"{pre}.attn", d, rng)
                L.init_layer_norm(s, f"{pre}.ln1", d)
                L.init_ffn(s, f"{pre}.ffn", d, hid, rng)
                L.init_layer_norm(s, f"{pre}.ln2", d)
        for li in range(config.dec_layers):
            pre = f"dec.{li}"
            blocks = ["self", "nsk", "cur"] + (["hist"] if config.use_history_encoder else [])
            for blk in blocks:
                L.init_mha(s, f"{pre}.{blk}", d, rng)
            for ln in range(5):
                L.init_layer_norm(s, f"{pre}.ln{ln}", d)
            L.init_ffn(s, f"{pre}.ffn", d, hid, rng)
        L.init_linear(s, "nsk_proj", config.d_rec, d, rng)
        L.init_linear(s, "user_proj", config.d_rec, d, rng)
        L.init_linear(s, "user_bias", config.d_rec, V, rng)
        s.add("copy.w", glorot(rng, d, d))
        L.init_linear(s, "out", d, V, rng)
        self.store = s

    def _encoder(self, name):
        return [self.store.scope(f"{name}.{li}") for li in range(self.cfg.enc_layers)]

    def _head_params(self):
        p = {k: v for k, v in self.store.items() if k.split(".")[0] in
             ("out", "user_bias", "user_proj", "copy")}
        p["tok_emb"] = self.store["tok_emb"]
        return p

    def context(self, ex, beta=None):
        beta = self.cfg.beta if beta is None else beta
        X_C = encode_dialogue(ex.current, self.store["tok_emb"], self._encoder("enc_cur"),
                              self.cfg.conv_heads)
        X_H = None
        if self.cfg.use_history_encoder and beta < 1.0 and len(ex.history):
            X_H = encode_dialogue(ex.history, self.store["tok_emb"], self._encoder("enc_hist"),
                                  self.cfg.conv_heads)
        N_SK = None
        if ex.N_SK is not None and len(ex.N_SK):
            N_SK = L.linear(T.Tensor(ex.N_SK), self.store.scope("nsk_proj"))
        u = T.Tensor(ex.u) if ex.u is not None else None
        return GenContext(X_C, X_H, N_SK, u, beta)

    def decode(self, ctx, prefix):
        d = self.cfg.d_conv
        toks = np.asarray(prefix, dtype=np.int64)
        R = self.store["tok_emb"][toks] + L.sinusoid_positions(len(toks), d)
        for li in range(self.cfg.dec_layers):
            R = decoder_layer(R, ctx, self.store.scope(f"dec.{li}"), self.cfg.conv_heads)
        return output_logits(R, ctx.u, self._head_params(), self.item_mask,
                             self.cfg.use_user_bias, self.cfg.use_copy)

    def targets(self, ex):
        return (list(ex.response) + [self.vocab.end])[:self.cfg.max_response_tokens]

    def teacher_logits(self, ex, ctx=None):
        y = self.targets(ex)
        ctx = self.context(ex) if ctx is None else ctx
        return self.decode(ctx, [self.vocab.start] + y[:-1]), y

    def loss(self, batch):
        logits, ys = [], []
        for ex in batch:
            lg, y = self.teacher_logits(ex)
            logits.append(lg)
            ys.append(y)
        return gen_loss(logits, ys)

    def generate(self, ex, max_len=None, mode="greedy", rng=None, k=5):
        """Greedy or top-k sampled response, stopping at the end token."""
        max_len = self.cfg.max_response_tokens if max_len is None else max_len
        out = []
        if max_len <= 0:
            return out
        with T.no_grad():
            ctx = self.context(ex)
            for _ in range(max_len):
                row = self.decode(ctx, [self.vocab.start] + out).data[-1]
                if mode == "greedy":
                    nxt = int(np.argmax(row))
                elif mode == "topk":
                    top = np.argsort(-row, kind="stable")[:k]
                    w = np.exp(row[top] - row[top].max())
                    nxt = int(top[rng.choice(len(top), p=w / w.sum())])
                else:
                    raise ValueError(f"unknown decoding mode {mode!r}")
                if nxt == self.vocab.end:
                    break
                out.append(nxt)
        return out


# -- data -----------------------------------------------------------------------
def build_conv_examples(corpus, session_ids, vocab, config, rec_model=None, collection=None):
    """One example per system utterance that has earlier utterances in its session."""
    N = None
    if rec_model is not None:
        with T.no_grad():
            N = rec_model.entity_embeddings()
    out = []
    for sid in session_ids:
        sess = corpus.session(sid)
        hist = corpus.history(sid, config.history_cap)
        hist_tokens = [h.tokens() for h in hist.sessions]
        cur, ents, items = [], [], []
        for t, utt in enumerate(sess.utterances):
            if utt.speaker == "system" and cur:
                c, h = truncate_context(cur, hist_tokens, config.max_current_tokens,
                                        config.max_history_tokens, vocab.sep)
                N_SK, u = _user_signal(rec_model, N, sid, sess.user_id, t, ents, items, hist,
                                       collection, config)
                out.append(ConvExample(sid, t, c, h, list(utt.tokens), N_SK, u))
            cur.extend(utt.tokens)
            ents.extend(utt.entities)
            items.extend(utt.items)
    return out


def _user_signal(rec_model, N, sid, uid, turn, ents, items, hist, collection, config):
    from .recommender import RecExample

    d = config.d_rec
    if rec_model is None or not ents:
        return np.zeros((0, d)), np.zeros(d)
    ex = RecExample(sid, uid, turn, tuple(sorted(set(ents))), tuple(sorted(set(items))), hist,
                    rec_model.catalogue[0])
    with T.no_grad():
        st = rec_model.user_state(rec_model.prepare(ex, collection), N)
    return st.N_SK.data.copy(), st.u.data.copy()


@dataclass
class ConvTrainResult:
    model: ConversationModel
    history: list
    best_epoch: int
    best_state: dict


def evaluate_conversation(model, examples, max_len=None):
    """Per-token loss and Distinct-2/3/4 of greedy responses."""
    if not examples:
        return {"loss": 0.0, "dist-2": 0.0, "dist-3": 0.0, "dist-4": 0.0}
    with T.no_grad():
        tot, ntok = 0.0, 0
        for ex in examples:
            tot += model.loss([ex]).item()
            ntok += len(model.targets(ex))
    responses = [model.generate(ex, max_len) for ex in examples]
    out = {"loss": tot / ntok}
    for n in (2, 3, 4):
        out[f"dist-{n}"] = distinct_n(responses, n)
    return out


def train_conversation(model, train, valid=(), epochs=None, on_epoch=None, generate_eval=False):
    cfg = model.cfg
    epochs = cfg.conv_epochs if epochs is None else epochs
    adam = AdamState(lr=cfg.lr)
    shuffle = cfg.rng("shuffle")
    bs = cfg.conv_batch_size

    def record(epoch, loss):
        row = {"epoch": epoch, "loss": loss}
        if valid:
            if generate_eval:
                for k, v in evaluate_conversation(model, valid).items():
                    row[f"valid/{k}"] = v
            else:
                with T.no_grad():
                    tot = sum(model.loss([ex]).item() for ex in valid)
                    ntok = sum(len(model.targets(ex)) for ex in valid)
                row["valid/loss"] = tot / ntok
        return row

    history = [record(0, None)]
    best_epoch, best_state = 0, model.store.state_dict()
    best = history[0].get("valid/loss", float("inf"))
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
        if row.get("valid/loss", -epoch) < best:
            best, best_epoch, best_state = row.get("valid/loss", -epoch), epoch, model.store.state_dict()
        if on_epoch:
            on_epoch(row)
    return ConvTrainResult(model, history, best_epoch, best_state)
