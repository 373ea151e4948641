"""Command-line entry points.

    hypercrs synth    --out DIR                       toy corpus + KG + config
    hypercrs pretrain --config CFG --out DIR          contrastive KG encoder
    hypercrs train    --config CFG --task rec|conv    recommender / generator
    hypercrs eval     --config CFG --checkpoint CKPT --split valid
    hypercrs generate --config CFG --checkpoint CKPT --sessions FILE
    hypercrs report   --out DIR                       re-render figures + summary

Every command writes its tables as CSV/JSON and, unless ``figures = false``,
PNG figures next to them. Exit codes: 0 ok, 1 invalid input, 2 I/O failure.
"""

import argparse
import csv
import glob
import json
import os
import sys

from . import conversation as C
from . import pretrain as PT
from . import recommender as R
from .config import ConfigError, Config, load_config, save_config
from .corpus import (CorpusError, DialogueCorpus, Vocab, generate_synthetic, load_corpus,
                     split_by_user, synthetic_vocab)
from .kg import KGError, build_extended_kg, build_task_kg, load_kg, save_items, save_relations
from .numeric.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
PATH_KEYS = ("corpus_path", "kg_path", "relations_path", "items_path", "vocab_path",
             "pretrained_path", "rec_checkpoint")


# -- io helpers -------------------------------------------------------------------
def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, rows, columns=None):
    columns = columns or sorted({k for r in rows for k in r}, key=lambda k: (k != "epoch", k))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (float(v) if v not in ("", None) else None) for k, v in r.items()})
    return out


def _config(args):
    if args.config:
        cfg = load_config(args.config)
        base = os.path.dirname(os.path.abspath(args.config))
        for key in PATH_KEYS:
            v = getattr(cfg, key)
            if v and not os.path.isabs(v):
                setattr(cfg, key, os.path.join(base, v))
    else:
        cfg = Config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


class Data:
    """Corpus, KG and vocabulary named by a config."""

    def __init__(self, cfg, need_vocab=False):
        for key in ("corpus_path", "kg_path"):
            if not getattr(cfg, key):
                raise ConfigError(f"{key} is not set")
        if need_vocab and not cfg.vocab_path:
            raise ConfigError("vocab_path is not set")
        self.vocab = Vocab.load(cfg.vocab_path) if cfg.vocab_path else None
        n_ent = None
        if self.vocab is not None and self.vocab.entity_of:
            n_ent = max(self.vocab.entity_of.values()) + 1
        self.kg = load_kg(cfg.kg_path, cfg.relations_path or None, cfg.items_path or None, n_ent)
        self.corpus = load_corpus(cfg.corpus_path, self.kg, self.vocab)
        self.split = split_by_user(self.corpus, (cfg.split_train, cfg.split_valid, cfg.split_test),
                                   cfg.seed)

    def ids(self, name):
        return getattr(self.split, name)


def _rec_model(cfg, data, state):
    task_kg = build_task_kg(data.kg, data.corpus, cfg.task_kg_hops)
    rec_state = {k: v for k, v in state.items() if not k.startswith("conv.")}
    return R.RecommenderModel(task_kg, data.kg.items, cfg, pretrained=rec_state)


def _conv_model(cfg, data):
    return C.ConversationModel(data.vocab, data.vocab.item_mask(data.kg.items), cfg)


# -- commands -------------------------------------------------------------------
def cmd_synth(args):
    out = _out(args)
    corpus, kg = generate_synthetic(args.users, args.items, args.entities, args.sessions_per_user,
                                    args.seed if args.seed is not None else 0)
    corpus.save(os.path.join(out, "corpus.jsonl"))
    kg.save(os.path.join(out, "kg.jsonl"))
    save_relations(os.path.join(out, "relations.jsonl"), kg)
    save_items(os.path.join(out, "items.txt"), kg)
    synthetic_vocab(kg.n_entities).save(os.path.join(out, "vocab.jsonl"))
    cfg = Config(corpus_path="corpus.jsonl", kg_path="kg.jsonl", relations_path="relations.jsonl",
                 items_path="items.txt", vocab_path="vocab.jsonl", d_rec=32, d_conv=32,
                 enc_layers=1, dec_layers=1, ffn_mult=2, queue_size=64, walk_hops=16,
                 pretrain_batch_size=16, pretrain_epochs=5, rec_batch_size=32, rec_epochs=10,
                 conv_batch_size=32, conv_epochs=3, max_response_tokens=10,
                 seed=args.seed if args.seed is not None else 0)
    save_config(os.path.join(out, "config.txt"), cfg)
    print(f"wrote {len(corpus)} sessions, {len(kg.triplets)} triplets to {out}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _config(args)
    out = _out(args)
    data = Data(cfg)
    task_kg = build_task_kg(data.kg, data.corpus, cfg.task_kg_hops)
    ext = build_extended_kg(data.kg, task_kg.relations_used)
    if len(ext.entities) < cfg.pretrain_batch_size:
        raise ConfigError("extended KG has fewer vertices than the pre-training batch size")
    state = PT.make_state(ext, cfg.d_rec, cfg.rng("init"), cfg.rng("walk"),
                          critical_budget=cfg.critical_budget, walks_per_node=cfg.critical_walks,
                          n_layers=cfg.rgcn_layers, momentum=cfg.momentum, tau=cfg.tau,
                          queue_size=cfg.queue_size, hops=cfg.walk_hops, restart_p=cfg.restart_p,
                          lr=cfg.pretrain_lr, weight_decay=cfg.pretrain_weight_decay,
                          warmup_frac=cfg.warmup_frac)
    probe = PT.make_probe(ext, state, min(64, len(ext.entities)), cfg.rng("probe"))

    def report(ep, loss, probe_val):
        print(f"epoch {ep:3d}  loss {loss:.4f}  probe {probe_val:.4f}")

    train, probes = PT.pretrain(ext, state, cfg.pretrain_epochs, cfg.pretrain_batch_size,
                                cfg.rng("sampling"), on_epoch=report, probe=probe)
    ckpt = os.path.join(out, "pretrained.ckpt")
    save_checkpoint(ckpt, PT.encoder_checkpoint(state))
    rows = [{"epoch": e, "train_loss": (train[e - 1] if e else None), "probe_loss": probes[e]}
            for e in range(len(probes))]
    write_csv(os.path.join(out, "pretrain_loss.csv"), rows, ["epoch", "train_loss", "probe_loss"])
    write_json(os.path.join(out, "pretrain_metrics.json"),
               {"train_loss": train, "probe_loss": probes, "entities": len(ext.entities),
                "triplets": int(len(ext.triplets))})
    if cfg.figures:
        from . import plotting

        plotting.loss_curve(os.path.join(out, "pretrain_loss.png"), list(range(len(probes))), probes,
                            "contrastive pre-training",
                            extra={"train (minibatch mean)": (list(range(1, len(train) + 1)), train)})
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _train_rec(cfg, data, out, init):
    pre_path = init or cfg.pretrained_path
    pretrained = load_checkpoint(pre_path) if pre_path else None

    def report(row):
        print(f"epoch {row['epoch']:3d}  " + "  ".join(
            f"{k} {v:.4f}" for k, v in row.items() if k != "epoch" and v is not None))

    res = R.train_recommender(data.corpus, data.kg, cfg, data.ids("train"), data.ids("valid"),
                              pretrained=pretrained, on_epoch=report)
    res.model.load_state_dict(res.best_state)
    ckpt = os.path.join(out, "rec.ckpt")
    save_checkpoint(ckpt, res.best_state)
    best = res.history[res.best_epoch]
    write_csv(os.path.join(out, "rec_history.csv"), res.history)
    write_json(os.path.join(out, "rec_metrics.json"),
               {"best_epoch": res.best_epoch, "best": best, "history": res.history})
    if cfg.figures:
        from . import plotting

        keys = [k for k in res.history[0] if k.startswith("valid/")]
        plotting.metric_curves(os.path.join(out, "rec_history.png"), res.history, keys,
                               "recommender validation")
    print(f"best epoch {res.best_epoch}; checkpoint: {ckpt}")
    return EXIT_OK


def _conv_examples(cfg, data, rec, ids, corpus=None):
    corpus = data.corpus if corpus is None else corpus
    coll = R.train_collection(data.corpus, data.ids("train"))
    return C.build_conv_examples(corpus, ids, data.vocab, cfg, rec, coll)


def _train_conv(cfg, data, out, init):
    rec_path = init or cfg.rec_checkpoint
    rec_state = load_checkpoint(rec_path) if rec_path else {}
    rec = _rec_model(cfg, data, rec_state) if rec_state else None
    model = _conv_model(cfg, data)
    train = _conv_examples(cfg, data, rec, data.ids("train"))
    valid = _conv_examples(cfg, data, rec, data.ids("valid"))
    if not train:
        raise ValueError("no training examples")

    def report(row):
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  valid/loss {row.get('valid/loss', float('nan')):.4f}")

    res = C.train_conversation(model, train, valid, on_epoch=report)
    model.store.load_state_dict(res.best_state)
    state = dict(rec.state_dict()) if rec is not None else {}
    state.update({f"conv.{k}": v for k, v in res.best_state.items()})
    ckpt = os.path.join(out, "conv.ckpt")
    save_checkpoint(ckpt, state)
    write_csv(os.path.join(out, "conv_history.csv"), res.history)
    write_json(os.path.join(out, "conv_metrics.json"),
               {"best_epoch": res.best_epoch, "best": res.history[res.best_epoch],
                "history": res.history})
    if cfg.figures:
        from . import plotting

        rows = res.history[1:]
        extra = {}
        if rows and "valid/loss" in rows[0]:
            extra["valid"] = ([r["epoch"] for r in res.history], [r["valid/loss"] for r in res.history])
        plotting.loss_curve(os.path.join(out, "conv_history.png"), [r["epoch"] for r in rows],
                            [r["loss"] for r in rows], "generator loss", extra)
    print(f"best epoch {res.best_epoch}; checkpoint: {ckpt}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    out = _out(args)
    data = Data(cfg, need_vocab=args.task == "conv")
    if args.task == "rec":
        return _train_rec(cfg, data, out, args.checkpoint)
    return _train_conv(cfg, data, out, args.checkpoint)


def read_predictions(path):
    """JSON-lines of ``{"ranking": [item ids, best first], "target": item id}``."""
    rankings, targets = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rankings.append([int(x) for x in row["ranking"]])
                targets.append(int(row["target"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise ValueError(f"{path}: line {lineno}: malformed prediction") from None
    return rankings, targets


def cmd_eval(args):
    out = _out(args)
    if args.predictions:
        rankings, targets = read_predictions(args.predictions)
        if not targets:
            raise ValueError("predictions file is empty")
        metrics = R.evaluate(rankings, targets)
        stem, figures = "predictions", True
        if args.config:
            figures = _config(args).figures
    else:
        cfg = _config(args)
        figures = cfg.figures
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required")
        state = load_checkpoint(args.checkpoint)
        data = Data(cfg, need_vocab=args.task == "conv")
        ids = data.ids(args.split)
        if args.task == "rec":
            rec = _rec_model(cfg, data, state)
            coll = R.train_collection(data.corpus, data.ids("train"))
            metrics = rec.metrics(R.prepare_split(rec, data.corpus, ids, coll, cfg.history_cap))
        else:
            rec = _rec_model(cfg, data, state) if "emb.table" in state else None
            model = _conv_model(cfg, data)
            model.store.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("conv.")})
            metrics = C.evaluate_conversation(model, _conv_examples(cfg, data, rec, ids))
        stem = f"{args.task}_{args.split}"
    write_json(os.path.join(out, f"{stem}_metrics.json"), metrics)
    write_csv(os.path.join(out, f"{stem}_metrics.csv"),
              [{"metric": k, "value": v} for k, v in sorted(metrics.items())], ["metric", "value"])
    if figures:
        from . import plotting

        plotting.metric_bars(os.path.join(out, f"{stem}_metrics.png"), metrics, stem)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_generate(args):
    cfg = _config(args)
    out = _out(args)
    if not args.checkpoint or not args.sessions:
        raise ConfigError("--checkpoint and --sessions are required")
    state = load_checkpoint(args.checkpoint)
    data = Data(cfg, need_vocab=True)
    extra = load_corpus(args.sessions, data.kg, data.vocab)
    fresh = {s.session_id for s in extra}
    merged = DialogueCorpus([s for s in data.corpus if s.session_id not in fresh] + list(extra))
    rec = _rec_model(cfg, data, state) if "emb.table" in state else None
    model = _conv_model(cfg, data)
    model.store.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("conv.")})
    examples = _conv_examples(cfg, data, rec, [s.session_id for s in extra], merged)
    rng = cfg.rng("decode")
    rows = []
    for ex in examples:
        toks = model.generate(ex, mode=cfg.decode, rng=rng, k=cfg.top_k)
        rows.append({"session_id": ex.session_id, "turn": ex.turn, "tokens": toks,
                     "text": data.vocab.decode(toks)})
    path = os.path.join(out, "responses.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    write_csv(os.path.join(out, "responses.csv"),
              [{"session_id": r["session_id"], "turn": r["turn"], "length": len(r["tokens"]),
                "text": r["text"]} for r in rows], ["session_id", "turn", "length", "text"])
    if cfg.figures:
        from . import plotting

        plotting.length_histogram(os.path.join(out, "responses.png"), [len(r["tokens"]) for r in rows])
    print(f"{len(rows)} responses -> {path}")
    return EXIT_OK


def cmd_report(args):
    """Re-render figures from the CSV tables in a run directory and summarise them."""
    from . import plotting

    out = _out(args)
    summary = []
    for path in sorted(glob.glob(os.path.join(out, "*_history.csv"))):
        rows = read_csv(path)
        if not rows:
            continue
        keys = [k for k in rows[0] if k.startswith("valid/")]
        png = path[:-4] + ".png"
        if keys:
            plotting.metric_curves(png, rows, keys, os.path.basename(path)[:-4])
        else:
            plotting.loss_curve(png, [r["epoch"] for r in rows[1:]], [r["loss"] for r in rows[1:]])
        last = rows[-1]
        for k in ["loss"] + keys:
            summary.append({"table": os.path.basename(path), "metric": k, "final": last.get(k)})
    pre = os.path.join(out, "pretrain_loss.csv")
    if os.path.exists(pre):
        rows = read_csv(pre)
        plotting.loss_curve(os.path.join(out, "pretrain_loss.png"), [r["epoch"] for r in rows],
                            [r["probe_loss"] for r in rows], "contrastive pre-training")
        summary.append({"table": "pretrain_loss.csv", "metric": "probe_loss",
                        "final": rows[-1]["probe_loss"]})
    if not summary:
        raise FileNotFoundError(f"no result tables found in {out}")
    write_csv(os.path.join(out, "summary.csv"), summary, ["table", "metric", "final"])
    for r in summary:
        print(f"{r['table']:<24} {r['metric']:<16} {r['final']}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="hypercrs", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", default=".", help="output directory")

    s = sub.add_parser("synth", help="write a synthetic corpus, KG, vocab and config")
    common(s, config=False)
    s.add_argument("--users", type=int, default=50)
    s.add_argument("--items", type=int, default=100)
    s.add_argument("--entities", type=int, default=200)
    s.add_argument("--sessions-per-user", type=int, default=5)

    s = sub.add_parser("pretrain", help="contrastive pre-training of the KG encoder")
    common(s)

    s = sub.add_parser("train", help="train the recommender or the response generator")
    common(s)
    s.add_argument("--task", choices=("rec", "conv"), default="rec")
    s.add_argument("--checkpoint", help="pre-trained encoder (rec) or recommender (conv)")

    s = sub.add_parser("eval", help="metrics for a checkpoint or a predictions file")
    common(s)
    s.add_argument("--task", choices=("rec", "conv"), default="rec")
    s.add_argument("--checkpoint")
    s.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    s.add_argument("--predictions", help="JSON-lines rankings to score instead of a model")

    s = sub.add_parser("generate", help="generate responses for the system turns of sessions")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--sessions", help="JSON-lines sessions in corpus format")

    s = sub.add_parser("report", help="re-render figures and a summary table for a run directory")
    s.add_argument("--out", default=".")
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "generate": cmd_generate, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, CorpusError, KGError, CheckpointError, ValueError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
