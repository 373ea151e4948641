from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, tensors=None):
        self._tensors = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name, value, requires_grad=True):
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = requires_grad
        t.grad = np.zeros_like(t.data)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return sorted(self._tensors)

    def items(self):
        return [(n, self._tensors[n]) for n in self.names()]

    def scope(self, prefix):
        """Sub-dict of parameters under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {n[len(p):]: t for n, t in self._tensors.items() if n.startswith(p)}

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad[...] = 0.0

    def state_dict(self):
        return {n: self._tensors[n].data.copy() for n in self.names()}

    def load_state_dict(self, state, strict=True):
        for name, arr in state.items():
            if name not in self._tensors:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            t = self._tensors[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {arr.shape}")
            t.data[...] = arr
        if strict:
            missing = set(self._tensors) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")

    def copy(self, requires_grad=True):
        out = ParameterStore()
        for n in self.names():
            out.add(n, Tensor(self._tensors[n].data.copy(), dtype=self._tensors[n].data.dtype),
                    requires_grad=requires_grad)
        return out


def glorot(rng, fan_in, fan_out, dtype=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype or np.float64)
