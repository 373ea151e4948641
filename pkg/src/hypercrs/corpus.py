"""Dialogue sessions: data model, JSON-lines IO, user splits, truncation and
a synthetic topic-clustered corpus for desk-scale experiments."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

SPECIAL_TOKENS = ("__pad__", "__start__", "__end__", "__sep__", "__unk__")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    speaker: str
    tokens: tuple
    entities: tuple = ()
    items: tuple = ()

    def to_json(self):
        return {"speaker": self.speaker, "tokens": list(self.tokens),
                "entities": list(self.entities), "items": list(self.items)}


@dataclass(frozen=True)
class Session:
    session_id: str
    user_id: str
    order: int
    utterances: tuple

    def item_set(self):
        return frozenset(i for u in self.utterances for i in u.items)

    def tokens(self):
        return [t for u in self.utterances for t in u.tokens]

    def to_json(self):
        return {"session_id": self.session_id, "user_id": self.user_id, "order": self.order,
                "utterances": [u.to_json() for u in self.utterances]}


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    sessions: tuple

    @property
    def item_set(self):
        """Historical item set: union of item mentions over prior sessions."""
        return frozenset().union(*(s.item_set() for s in self.sessions))


@dataclass(frozen=True)
class Split:
    train: tuple
    valid: tuple
    test: tuple


class DialogueCorpus:
    def __init__(self, sessions=()):
        self.sessions = tuple(sorted(sessions, key=lambda s: (s.user_id, s.order, s.session_id)))
        self._by_id = {}
        for s in self.sessions:
            if s.session_id in self._by_id:
                raise CorpusError(f"duplicate session id {s.session_id!r}")
            self._by_id[s.session_id] = s
        self._by_user = {}
        for s in self.sessions:
            self._by_user.setdefault(s.user_id, []).append(s)

    def __len__(self):
        return len(self.sessions)

    def __eq__(self, other):
        return isinstance(other, DialogueCorpus) and self.sessions == other.sessions

    def __iter__(self):
        return iter(self.sessions)

    @property
    def users(self):
        return sorted(self._by_user)

    def session(self, session_id):
        return self._by_id[session_id]

    def user_sessions(self, user_id):
        return list(self._by_user.get(user_id, ()))

    def history(self, session_id, cap=None):
        """Sessions of the same user strictly before ``session_id``, oldest first."""
        cur = self._by_id[session_id]
        prior = [s for s in self._by_user[cur.user_id]
                 if (s.order, s.session_id) < (cur.order, cur.session_id)]
        if cap is not None:
            prior = prior[-cap:] if cap > 0 else []
        return UserHistory(cur.user_id, tuple(prior))

    def subset(self, session_ids):
        ids = set(session_ids)
        return DialogueCorpus(s for s in self.sessions if s.session_id in ids)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.sessions:
                fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def _int_list(obj, key, lineno):
    val = obj.get(key, [])
    if not isinstance(val, list) or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0
                                            for x in val):
        raise CorpusError(f"line {lineno}: {key!r} must be a list of nonnegative ints")
    return tuple(val)


def parse_session(obj, lineno=0, n_entities=None, items=None, vocab_size=None):
    if not isinstance(obj, dict):
        raise CorpusError(f"line {lineno}: expected a JSON object")
    try:
        sid, uid, order = str(obj["session_id"]), str(obj["user_id"]), obj["order"]
        raw = obj["utterances"]
    except KeyError as exc:
        raise CorpusError(f"line {lineno}: missing field {exc}") from None
    if not isinstance(order, int):
        raise CorpusError(f"line {lineno}: 'order' must be an int")
    if not isinstance(raw, list) or not raw:
        raise CorpusError(f"line {lineno}: session {sid!r} has no utterances")
    utts = []
    for u in raw:
        speaker = u.get("speaker")
        if speaker not in ("user", "system"):
            raise CorpusError(f"line {lineno}: bad speaker {speaker!r}")
        tokens = _int_list(u, "tokens", lineno)
        ents = _int_list(u, "entities", lineno)
        its = _int_list(u, "items", lineno)
        if not tokens:
            raise CorpusError(f"line {lineno}: empty utterance")
        if not set(its) <= set(ents):
            raise CorpusError(f"line {lineno}: item mentions must also be entity mentions")
        if n_entities is not None and any(e >= n_entities for e in ents):
            raise CorpusError(f"line {lineno}: unknown entity id")
        if items is not None and any(i not in items for i in its):
            raise CorpusError(f"line {lineno}: mentioned item is not a catalogue item")
        if vocab_size is not None and any(t >= vocab_size for t in tokens):
            raise CorpusError(f"line {lineno}: token id out of vocabulary")
        utts.append(Utterance(speaker, tokens, ents, its))
    return Session(sid, uid, order, tuple(utts))


def load_corpus(path, kg=None, vocab=None):
    """Read a JSON-lines corpus, validating IDs against ``kg``/``vocab`` if given."""
    n_ent = kg.n_entities if kg is not None else None
    items = kg.items if kg is not None else None
    vsize = len(vocab) if vocab is not None else None
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            sessions.append(parse_session(obj, lineno, n_ent, items, vsize))
    return DialogueCorpus(sessions)


# -- vocabulary ----------------------------------------------------------
class Vocab:
    """Token table; tokens may carry the entity id they stand for."""

    def __init__(self, tokens, entity_of=None):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("duplicate vocabulary tokens")
        self.entity_of = dict(entity_of or {})
        for name in ("__start__", "__end__", "__sep__"):
            if name not in self.index:
                raise CorpusError(f"vocabulary lacks special token {name}")

    def __len__(self):
        return len(self.tokens)

    @property
    def start(self):
        return self.index["__start__"]

    @property
    def end(self):
        return self.index["__end__"]

    @property
    def sep(self):
        return self.index["__sep__"]

    def item_mask(self, items):
        mask = np.zeros(len(self.tokens), dtype=bool)
        for tok, ent in self.entity_of.items():
            if ent in items:
                mask[tok] = True
        return mask

    def decode(self, ids):
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                row = {"id": i, "token": tok}
                if i in self.entity_of:
                    row["entity"] = self.entity_of[i]
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path):
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError:
                        raise CorpusError(f"line {lineno}: malformed JSON") from None
        rows.sort(key=lambda r: r["id"])
        if [r["id"] for r in rows] != list(range(len(rows))):
            raise CorpusError("vocabulary ids must be dense from 0")
        return cls([r["token"] for r in rows],
                   {r["id"]: r["entity"] for r in rows if "entity" in r})


# -- splitting / truncation ---------------------------------------------
def split_by_user(corpus, ratios=(0.8, 0.1, 0.1), seed=0):
    """User-disjoint train/valid/test split of session ids.

    Users are shuffled under ``seed`` and cut at rounded cumulative ratio
    boundaries, so 956 users at 8:1:1 give 765/95/96.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    users = corpus.users
    if len(users) < 3:
        raise ValueError("need at least as many users as splits")
    rng = np.random.default_rng([seed, 0])
    order = [users[i] for i in rng.permutation(len(users))]
    n = len(users)
    c1 = int(round(ratios[0] * n))
    c2 = int(round((ratios[0] + ratios[1]) * n))
    groups = (order[:c1], order[c1:c2], order[c2:])
    out = []
    for g in groups:
        ids = [s.session_id for u in sorted(g) for s in corpus.user_sessions(u)]
        out.append(tuple(ids))
    return Split(*out)


def truncate_context(current, history, max_current=256, max_history=1024, sep=3):
    """Keep the most recent tokens of the current session and of the history.

    ``current`` is a flat token list; ``history`` is a list of per-session
    token lists (oldest first), joined with ``sep`` before truncation.
    """
    if max_current <= 0 or max_history <= 0:
        raise ValueError("truncation limits must be positive")
    cur = list(current)[-max_current:]
    joined = []
    for i, toks in enumerate(history):
        if i:
            joined.append(sep)
        joined.extend(toks)
    return cur, joined[-max_history:]


# -- synthetic data -------------------------------------------------------
_WORDS = ("hello", "hi", "i", "want", "something", "like", "and", "maybe", "how", "about",
          "you", "might", "enjoy", "saw", "what", "else", "thanks", "bye", "great", "watch",
          "try", "with", "loved", "recommend")

RELATIONS = ("has_attribute", "related_to", "features")


def synthetic_layout(n_items, n_entities, n_topics=5):
    """Entity id ranges: items first, then topic attributes, then generic entities."""
    if n_items < n_topics:
        raise ValueError("need at least one item per topic")
    rest = n_entities - n_items
    if rest < 2 * n_topics:
        raise ValueError("too few non-item entities for the topic layout")
    n_attr = max(n_topics, (rest * 2) // 5 // n_topics * n_topics)
    attrs = list(range(n_items, n_items + n_attr))
    generic = list(range(n_items + n_attr, n_entities))
    return attrs, generic


def synthetic_vocab(n_entities):
    tokens = list(SPECIAL_TOKENS) + list(_WORDS)
    base = len(tokens)
    tokens += [f"ent_{e}" for e in range(n_entities)]
    return Vocab(tokens, {base + e: e for e in range(n_entities)})


def generate_synthetic(n_users, n_items, n_entities, sessions_per_user, seed, n_topics=5,
                       hint_prob=0.3, favourite_prob=0.9, n_favourites=4):
    """Topic-clustered toy world: returns ``(corpus, kg)``.

    Each user has a latent topic and a few favourite items of that topic.
    A session opens with a user turn naming a topic attribute (with
    probability ``hint_prob``, otherwise an uninformative generic entity)
    plus a generic entity, and then alternates two system recommendations
    with user acknowledgements. Items link to attributes of their topic in
    the KG; generic entities feature in random items.
    """
    from .kg import KnowledgeGraph

    if min(n_users, n_items, n_entities, sessions_per_user) <= 0:
        raise ValueError("generator parameters must be positive")
    attrs, generic = synthetic_layout(n_items, n_entities, n_topics)
    rng = np.random.default_rng([seed, 11])
    vocab = synthetic_vocab(n_entities)
    w = vocab.index
    ent_tok = {e: tok for tok, e in vocab.entity_of.items()}

    topic_items = [[i for i in range(n_items) if i % n_topics == t] for t in range(n_topics)]
    topic_attrs = [[a for k, a in enumerate(attrs) if k % n_topics == t] for t in range(n_topics)]

    triplets = set()
    for i in range(n_items):
        pool = topic_attrs[i % n_topics]
        for a in rng.choice(pool, size=min(2, len(pool)), replace=False):
            triplets.add((i, 0, int(a)))
    for t in range(n_topics):
        pool = topic_attrs[t]
        for a, b in zip(pool, pool[1:]):
            triplets.add((a, 1, b))
    for g in generic:
        for i in rng.choice(n_items, size=min(2, n_items), replace=False):
            triplets.add((g, 2, int(i)))
    kg = KnowledgeGraph(n_entities, len(RELATIONS), sorted(triplets), items=range(n_items),
                        relation_names=RELATIONS)

    sessions = []
    for u in range(n_users):
        topic = u % n_topics
        pool = topic_items[topic]
        favs = [int(x) for x in rng.choice(pool, size=min(n_favourites, len(pool)), replace=False)]

        def pick():
            if rng.random() < favourite_prob:
                return favs[int(rng.integers(len(favs)))]
            return int(pool[int(rng.integers(len(pool)))])

        for s in range(sessions_per_user):
            if rng.random() < hint_prob:
                cue = int(rng.choice(topic_attrs[topic]))
            else:
                cue = int(rng.choice(generic))
            extra = int(rng.choice(generic))
            first = pick()
            second = pick()
            while second == first and len(pool) > 1:
                second = pick()
            cue_ents = tuple(dict.fromkeys((cue, extra)))
            utts = (
                Utterance("user", (w["hello"], w["i"], w["want"], w["something"], w["like"],
                                   ent_tok[cue], w["and"], ent_tok[extra]), cue_ents, ()),
                Utterance("system", (w["how"], w["about"], ent_tok[first]), (first,), (first,)),
                Utterance("user", (w["i"], w["saw"], ent_tok[first], w["what"], w["else"]),
                          (first,), (first,)),
                Utterance("system", (w["you"], w["might"], w["enjoy"], ent_tok[second]),
                          (second,), (second,)),
                Utterance("user", (w["thanks"], w["bye"]), (), ()),
            )
            sessions.append(Session(f"u{u:04d}_s{s:03d}", f"u{u:04d}", s, utts))
    return DialogueCorpus(sessions), kg
