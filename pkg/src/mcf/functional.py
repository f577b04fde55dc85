"""Differentiable building blocks used by the fusion network.

All functions treat the last axis as the feature axis and the one before it
as the token axis; any leading axes are batch axes and are carried through
unchanged.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import (
    DimensionError,
    InvalidMaskError,
    ParameterError,
    Tensor,
    _make,
    add,
    as_tensor,
    concat,
    matmul,
    relu,
)

MASK_FILL = -1e9


def _check_mask(mask, n, what):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n:
        raise DimensionError(f"{what} mask has length {mask.shape[-1]}, expected {n}")
    if not mask.any(axis=-1).all():
        raise InvalidMaskError(f"{what} mask leaves no valid position")
    return mask


def softmax_rows(x, mask=None):
    """Row-wise softmax over the last axis.

    ``mask`` is a boolean array (True = keep) broadcastable against ``x``
    along the leading axes; masked logits receive an additive -1e9.
    """
    x = as_tensor(x)
    logits = x.data
    if mask is not None:
        mask = _check_mask(mask, x.shape[-1], "softmax")
        logits = logits + np.where(mask, 0.0, MASK_FILL).astype(x.dtype)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), back)


def log_softmax(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardise each row with its population variance, then scale and shift."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm width {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    xc = xd - xd.sum(axis=-1, keepdims=True) / d
    var = (xc * xc).sum(axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


def linear(x, W, b):
    """``x @ W + b`` applied to every row."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"linear: input {x.shape} incompatible with W {W.shape} and b {b.shape}")
    xd, Wd = x.data, W.data
    x2 = xd.reshape(-1, Wd.shape[0])

    def back(g):
        g2 = g.reshape(-1, Wd.shape[1])
        gx = (g2 @ Wd.T).reshape(xd.shape)
        gW = x2.T @ g2
        if T._grad_fault != 1.0:
            gx, gW = gx * T._grad_fault, gW * T._grad_fault
        return gx, gW, g2.sum(axis=0)

    out = (x2 @ Wd + b.data).reshape(xd.shape[:-1] + (Wd.shape[1],))
    return _make(out, (x, W, b), back)


def ffn(x, params):
    """Position-wise feed-forward: linear, ReLU, linear."""
    return linear(relu(linear(x, params.W1, params.b1)), params.W2, params.b2)


def dropout(x, p, mode, rng=None):
    """Inverted dropout. Identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    if rng is None:
        raise ParameterError("train-mode dropout needs an RngState")
    x = as_tensor(x)
    keep = (rng.uniform(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def masked_mean_pool(x, mask=None):
    """Mean over the token axis (-2), counting only rows where ``mask`` is True."""
    x = as_tensor(x)
    t = x.shape[-2]
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    mask = _check_mask(mask, t, "pool")
    w = mask.astype(x.dtype)
    w = w / w.sum(axis=-1, keepdims=True)
    w = np.broadcast_to(w, x.shape[:-1])
    w = w[..., None]
    out = (w * x.data).sum(axis=-2)
    return _make(out, (x,), lambda g: (w * g[..., None, :],))


def concat_last(a, b):
    return concat([as_tensor(a), as_tensor(b)], axis=-1)


def to_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
