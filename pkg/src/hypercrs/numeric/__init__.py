"""Minimal deterministic tensor substrate used by every model in the package."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (causal_mask, feed_forward, layer_norm, linear,
                     multi_head_attention)
from .optim import AdamState, adam_step, warmup_lr
from .params import ParameterStore
from .tensor import (Tensor, backward, concat, get_default_dtype, l2_normalize,
                     log_softmax, matmul, no_grad, relu, set_default_dtype,
                     softmax, sparse_matmul)

__all__ = [
    "AdamState", "CheckpointError", "ParameterStore", "Tensor", "adam_step",
    "backward", "causal_mask", "concat", "feed_forward", "get_default_dtype",
    "l2_normalize", "layer_norm", "linear", "load_checkpoint", "log_softmax",
    "matmul", "multi_head_attention", "no_grad", "relu", "save_checkpoint",
    "set_default_dtype", "softmax", "sparse_matmul", "warmup_lr",
]
