"""Scaled dot-product and multi-head attention."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .nn import Module, xavier_uniform
from .tensor import DEFAULT_DTYPE, DimensionError, Parameter, _make, as_tensor, matmul


def scaled_dot_attention(Q, K, V, mask=None):
    """Return ``(context, weights)`` for ``softmax(Q K^T / sqrt(d_h)) V``.

    Leading axes are batch/head axes. ``mask`` has the key length as its last
    axis and broadcasts over the query axis.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"keys {K.shape} and values {V.shape} differ in length")
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    d_h = Q.shape[-1]
    scores = matmul(Q, K.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_h))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, :]
    weights = F.softmax_rows(scores, mask)
    return matmul(weights, V), weights


class MhaParams(Module):
    """Query/key/value/output projections for ``heads`` attention heads."""

    def __init__(self, d_model, heads, rng, dtype=DEFAULT_DTYPE):
        if d_model % heads:
            raise DimensionError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.d_model = d_model
        for name in ("q", "k", "v", "o"):
            setattr(self, f"W_{name}", Parameter(xavier_uniform(rng, d_model, d_model, dtype)))
            setattr(self, f"b_{name}", Parameter(np.zeros(d_model, dtype=dtype)))

    @property
    def d_head(self):
        return self.d_model // self.heads


def _split_heads(x, heads):
    """``[..., t, d] -> [..., heads, t, d / heads]`` as one graph node."""
    *lead, t, d = x.shape
    shape = x.shape
    out = np.swapaxes(x.data.reshape(*lead, t, heads, d // heads), -3, -2)
    return _make(out, (x,), lambda g: (np.swapaxes(g, -3, -2).reshape(shape),))


def _merge_heads(x):
    *lead, h, t, dh = x.shape
    shape = x.shape
    out = np.swapaxes(x.data, -3, -2).reshape(*lead, t, h * dh)
    return _make(out, (x,), lambda g: (np.swapaxes(g.reshape(*lead, t, h, dh), -3, -2),))


def multi_head_attention(p, Q, K, V, mask=None, return_weights=False):
    """Project, attend per head, concatenate heads and apply the output map."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    for what, x in (("query", Q), ("key", K), ("value", V)):
        if x.shape[-1] != p.d_model:
            raise DimensionError(f"{what} width {x.shape[-1]} != d_model {p.d_model}")
    q = _split_heads(F.linear(Q, p.W_q, p.b_q), p.heads)
    k = _split_heads(F.linear(K, p.W_k, p.b_k), p.heads)
    v = _split_heads(F.linear(V, p.W_v, p.b_v), p.heads)
    if mask is not None:
        # broadcast over the head axis
        mask = np.asarray(mask, dtype=bool)[..., None, :]
    ctx, weights = scaled_dot_attention(q, k, v, mask)
    out = F.linear(_merge_heads(ctx), p.W_o, p.b_o)
    if return_weights:
        return out, weights.data
    return out
