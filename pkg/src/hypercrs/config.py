"""Flat ``key = value`` configuration with typed parsing.

Unknown keys are an error: a typo in a hyperparameter name must never be
silently ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # data
    corpus_path: str = ""
    kg_path: str = ""
    relations_path: str = ""
    items_path: str = ""
    vocab_path: str = ""
    pretrained_path: str = ""
    rec_checkpoint: str = ""
    # dimensions / depth
    d_rec: int = 128
    d_conv: int = 300
    rgcn_layers: int = 1
    hconv_layers: int = 1
    rec_heads: int = 2
    conv_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_mult: int = 4
    # model switches
    use_session_hypergraph: bool = True
    use_knowledge_hypergraph: bool = True
    use_extension: bool = True
    use_user_bias: bool = True
    use_copy: bool = True
    use_history_encoder: bool = True
    beta: float = 0.9
    n_hops: int = 1
    task_kg_hops: int = 2
    ext_gamma: float = 1.0
    ext_k_max: int = 10
    history_cap: int = 10
    max_current_tokens: int = 256
    max_history_tokens: int = 1024
    max_response_tokens: int = 30
    # pre-training
    tau: float = 0.07
    momentum: float = 0.999
    queue_size: int = 256
    walk_hops: int = 128
    restart_p: float = 0.5
    pretrain_lr: float = 0.005
    pretrain_weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    pretrain_batch_size: int = 32
    pretrain_epochs: int = 10
    critical_budget: int = -1
    critical_walks: int = 2
    # training
    lr: float = 0.001
    rec_batch_size: int = 256
    conv_batch_size: int = 128
    rec_epochs: int = 10
    conv_epochs: int = 10
    split_train: float = 0.8
    split_valid: float = 0.1
    split_test: float = 0.1
    decode: str = "greedy"
    top_k: int = 5
    seed: int = 0
    figures: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("d_rec", "d_conv", "rgcn_layers", "hconv_layers", "rec_heads", "conv_heads",
                    "enc_layers", "dec_layers", "ffn_mult", "queue_size", "ext_k_max",
                    "max_current_tokens", "max_history_tokens", "max_response_tokens",
                    "pretrain_batch_size", "rec_batch_size", "conv_batch_size", "top_k",
                    "critical_walks")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        nonneg = ("n_hops", "task_kg_hops", "walk_hops", "history_cap", "pretrain_epochs",
                  "rec_epochs", "conv_epochs", "ext_gamma", "pretrain_weight_decay")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.restart_p <= 1.0:
            raise ConfigError("restart_p must lie in [0, 1]")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1]")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("learning rates must be positive")
        ratios = (self.split_train, self.split_valid, self.split_test)
        if min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must be nonnegative and sum to 1")
        if self.decode not in ("greedy", "topk"):
            raise ConfigError("decode must be 'greedy' or 'topk'")
        if self.d_rec % self.rec_heads or self.d_conv % self.conv_heads:
            raise ConfigError("model dims must be divisible by the head counts")
        if self.critical_budget < -1:
            raise ConfigError("critical_budget must be -1 (all) or nonnegative")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def rng(self, stream, seed=None):
        """Independent generator for a named randomness stream."""
        return np.random.default_rng([self.seed if seed is None else seed, _STREAMS[stream]])


_STREAMS = {"split": 1, "init": 2, "walk": 3, "sampling": 4, "shuffle": 5, "decode": 6, "probe": 7}


def _parse_value(name, typ, raw):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    return raw


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text):
    types = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, types[key], raw)
    return Config(**values)


def dump_config(cfg):
    lines = []
    for f in fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
