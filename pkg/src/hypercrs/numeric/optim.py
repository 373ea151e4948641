from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store, state, lr=None):
    """One Adam update with bias correction; gradients are left in place.

    Weight decay, when set, is added to the gradient (L2 style).
    Parameters with ``requires_grad`` off are skipped.
    """
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in store.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape drift on {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape drift on {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def warmup_lr(step, total_steps, base_lr, warmup_frac=0.1):
    """Linear ramp over the first ``warmup_frac`` of steps, then constant."""
    warm = max(1, int(np.ceil(warmup_frac * total_steps))) if warmup_frac > 0 else 0
    if step < warm:
        return base_lr * (step + 1) / warm
    return base_lr
