"""Parameter containers: a tiny module tree with named parameter traversal."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Parameter


def xavier_uniform(rng, fan_in, fan_out, dtype=DEFAULT_DTYPE):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Module:
    """Base class; parameters and submodules are discovered from attributes.

    Names are slash-joined attribute paths. A list attribute ``layers``
    contributes ``layer0``, ``layer1``, ... segments.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}/")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                stem = name[:-1] if name.endswith("s") else name
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{prefix}{stem}{i}/")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype):
        """Cast every parameter in place (used for 64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


class Linear(Module):
    def __init__(self, d_in, d_out, rng, identity=False, dtype=DEFAULT_DTYPE):
        if identity and d_in == d_out:
            w = np.eye(d_in, dtype=dtype)
        else:
            w = xavier_uniform(rng, d_in, d_out, dtype)
        self.W = Parameter(w)
        self.b = Parameter(np.zeros(d_out, dtype=dtype))

    @property
    def d_in(self):
        return self.W.shape[0]

    @property
    def d_out(self):
        return self.W.shape[1]

    def __call__(self, x):
        return F.linear(x, self.W, self.b)

    def set_trainable(self, flag):
        for p in self.parameters():
            p.trainable = flag


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Two-layer position-wise network; the inner width defaults to ``2 * d``."""

    def __init__(self, d, rng, d_ff=None, dtype=DEFAULT_DTYPE):
        d_ff = 2 * d if d_ff is None else d_ff
        self.W1 = Parameter(xavier_uniform(rng, d, d_ff, dtype))
        self.b1 = Parameter(np.zeros(d_ff, dtype=dtype))
        self.W2 = Parameter(xavier_uniform(rng, d_ff, d, dtype))
        self.b2 = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x):
        return F.ffn(x, self)
