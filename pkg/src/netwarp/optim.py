"""Named parameter collection and Adam optimizer state."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .tensor import Tensor, load_archive, save_archive


class ParamSet:
    """Ordered name -> Tensor map with per-parameter trainable flags."""

    def __init__(self):
        self._params = {}
        self._trainable = {}

    def add(self, name, tensor, trainable=True):
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        self._trainable[name] = trainable
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def set_trainable(self, prefix, flag):
        for name in self._params:
            if name.startswith(prefix):
                self._trainable[name] = flag

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def count(self, prefix=""):
        return sum(
            int(np.prod(t.shape)) for n, t in self._params.items() if n.startswith(prefix)
        )

    def save(self, path):
        save_archive(path, self._params)

    def load(self, path, strict=True):
        entries = load_archive(path)
        for name, t in entries.items():
            if name in self._params:
                if self._params[name].shape != t.shape:
                    raise ValidationError(
                        f"checkpoint shape mismatch for {name!r}: "
                        f"{t.shape} vs {self._params[name].shape}"
                    )
                self._params[name].data[...] = t.data.astype(self._params[name].dtype)
            elif strict:
                raise ValidationError(f"unexpected checkpoint entry {name!r}")
        if strict:
            missing = set(self._params) - set(entries)
            if missing:
                raise ValidationError(f"checkpoint missing entries: {sorted(missing)}")

    def state_copy(self):
        return {n: t.data.copy() for n, t in self._params.items()}


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.trainable_items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
