"""Cross-modal encoder layers and the stacked block built from them.

``MhaEncLayer`` is a post-norm transformer layer whose attention sublayer
attends from the query stream to a separate key/value stream.
``SagMhaEncLayer`` first refines the queries with self-attention and then
runs an ``MhaEncLayer``. ``CmEncBlock`` stacks either kind: every layer
receives the previous layer's output as its query and the *same* key/value
tensors.
"""

from __future__ import annotations

from . import functional as F
from .attention import MhaParams, multi_head_attention
from .nn import FeedForward, LayerNorm, Module
from .tensor import DEFAULT_DTYPE

MHA_ENC = "mha"
SAG_MHA_ENC = "sag"
VARIANTS = (MHA_ENC, SAG_MHA_ENC)


class MhaEncLayer(Module):
    def __init__(self, d_model, heads, rng, dropout_p=0.1, d_ff=None, dtype=DEFAULT_DTYPE):
        self.mha = MhaParams(d_model, heads, rng, dtype)
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.ffn = FeedForward(d_model, rng, d_ff, dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.dropout_p = dropout_p

    def __call__(self, Q, K, V, mask=None, mode="eval", rng=None):
        return mha_enc_forward(self, Q, K, V, mask, mode, rng)


class SagMhaEncLayer(Module):
    def __init__(self, d_model, heads, rng, dropout_p=0.1, d_ff=None, dtype=DEFAULT_DTYPE):
        self.self_mha = MhaParams(d_model, heads, rng, dtype)
        self.ln_self = LayerNorm(d_model, dtype=dtype)
        self.inner = MhaEncLayer(d_model, heads, rng, dropout_p, d_ff, dtype)
        self.dropout_p = dropout_p

    def __call__(self, Q, K, V, mask=None, mode="eval", rng=None):
        return sag_mha_enc_forward(self, Q, K, V, mask, mode, rng)


def mha_enc_forward(layer, Q, K, V, mask=None, mode="eval", rng=None):
    p = layer.dropout_p
    attn = multi_head_attention(layer.mha, Q, K, V, mask)
    q1 = layer.ln1(F.to_tensor(Q) + F.dropout(attn, p, mode, rng))
    return layer.ln2(F.dropout(layer.ffn(q1), p, mode, rng) + q1)


def sag_mha_enc_forward(layer, Q, K, V, mask=None, mode="eval", rng=None):
    Q = F.to_tensor(Q)
    self_attn = multi_head_attention(layer.self_mha, Q, Q, Q)
    q1 = layer.ln_self(Q + F.dropout(self_attn, layer.dropout_p, mode, rng))
    return mha_enc_forward(layer.inner, q1, K, V, mask, mode, rng)


class CmEncBlock(Module):
    def __init__(self, variant, n_layers, d_model, heads, rng, dropout_p=0.1, d_ff=None,
                 dtype=DEFAULT_DTYPE):
        if variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {variant!r}; expected one of {VARIANTS}")
        if n_layers < 1:
            raise ValueError(f"a block needs at least one layer, got {n_layers}")
        cls = MhaEncLayer if variant == MHA_ENC else SagMhaEncLayer
        self.variant = variant
        self.d_model = d_model
        self.heads = heads
        self.layers = [cls(d_model, heads, rng, dropout_p, d_ff, dtype) for _ in range(n_layers)]

    def __len__(self):
        return len(self.layers)

    def __call__(self, Q, K, V, mask=None, mode="eval", rng=None, trace=None):
        return cm_enc_forward(self, Q, K, V, mask, mode, rng, trace)


def cm_enc_forward(block, Q, K, V, mask=None, mode="eval", rng=None, trace=None):
    """Run the stack.

    ``trace``, if given, is a list that receives ``(i, K, V, output)`` copies
    for every layer, as plain arrays.
    """
    q = Q
    for i, layer in enumerate(block.layers):
        q = layer(q, K, V, mask, mode, rng)
        if trace is not None:
            trace.append((i, F.to_tensor(K).data.copy(), F.to_tensor(V).data.copy(), q.data.copy()))
    return q
