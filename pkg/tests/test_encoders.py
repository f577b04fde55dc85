import numpy as np
import pytest

from mcf import functional as F
from mcf.attention import multi_head_attention
from mcf.encoders import (MHA_ENC, SAG_MHA_ENC, CmEncBlock, MhaEncLayer, SagMhaEncLayer, cm_enc_forward,
                          mha_enc_forward, sag_mha_enc_forward)
from mcf.gradcheck import grad_check
from mcf.tensor import RngState, Tensor


def inputs(rng, t_q=3, t_k=5, d=8, batch=None):
    lead = () if batch is None else (batch,)
    return (rng.normal(size=lead + (t_q, d)), rng.normal(size=lead + (t_k, d)),
            rng.normal(size=lead + (t_k, d)))


def layer(kind=MHA_ENC, d=8, heads=2, p=0.0, seed=0):
    cls = MhaEncLayer if kind == MHA_ENC else SagMhaEncLayer
    return cls(d, heads, np.random.default_rng(seed), dropout_p=p, dtype=np.float64)


def zero_sublayers(lay):
    lay.mha.W_o.data[...] = 0
    lay.mha.b_o.data[...] = 0
    for p in lay.ffn.parameters():
        p.data[...] = 0


@pytest.mark.parametrize("t_q,t_k", [(1, 1), (3, 5), (7, 2)])
def test_shape_preserved(rng, t_q, t_k):
    Q, K, V = inputs(rng, t_q, t_k)
    assert mha_enc_forward(layer(), Q, K, V).shape == (t_q, 8)
    assert sag_mha_enc_forward(layer(SAG_MHA_ENC), Q, K, V).shape == (t_q, 8)


def test_zeroed_sublayers_reduce_to_layer_norm(rng):
    # two LN passes differ from one by ~xhat * eps * |1/var - 1| / 2: under 1e-5 at d=4, var >= 1
    lay = layer(d=4)
    zero_sublayers(lay)
    Q, K, V = inputs(rng, d=4)
    Q = 3 * (Q - Q.mean(-1, keepdims=True)) / Q.std(-1, keepdims=True)
    ln = F.layer_norm(Tensor(Q), lay.ln1.gamma, lay.ln1.beta)
    np.testing.assert_allclose(mha_enc_forward(lay, Q, K, V).data, ln.data, rtol=0, atol=1e-5)


def test_zeroed_sublayers_residual_closed_form(rng):
    lay = layer(d=16)
    zero_sublayers(lay)
    Q, K, V = inputs(rng, d=16)
    Q *= 0.2
    xhat = (Q - Q.mean(-1, keepdims=True)) / Q.std(-1, keepdims=True)
    s = np.sqrt(Q.var(-1, keepdims=True) / (Q.var(-1, keepdims=True) + 1e-5))
    once = F.layer_norm(Tensor(Q), lay.ln1.gamma, lay.ln1.beta).data
    np.testing.assert_allclose(mha_enc_forward(lay, Q, K, V).data - once,
                               xhat * s * (1 / np.sqrt(s * s + 1e-5) - 1), rtol=0, atol=1e-12)


def test_sag_with_zero_self_projection_reduces_to_inner(rng):
    lay = layer(SAG_MHA_ENC)
    lay.self_mha.W_o.data[...] = 0
    lay.self_mha.b_o.data[...] = 0
    Q, K, V = inputs(rng)
    mask = np.array([1, 0, 1, 1, 1], dtype=bool)
    pre = lay.ln_self(Tensor(Q))
    ref = mha_enc_forward(lay.inner, pre, K, V, mask)
    np.testing.assert_array_equal(sag_mha_enc_forward(lay, Q, K, V, mask).data, ref.data)


def test_sag_single_token_self_attention_is_forced(rng):
    lay = layer(SAG_MHA_ENC)
    Q = Tensor(rng.normal(size=(1, 8)))
    _, w = multi_head_attention(lay.self_mha, Q, Q, Q, return_weights=True)
    np.testing.assert_array_equal(w, np.ones((2, 1, 1)))


def test_matches_hand_composed_chain(rng):
    lay = layer()
    Q, K, V = inputs(rng)
    attn = multi_head_attention(lay.mha, Q, K, V)
    q1 = F.layer_norm(Tensor(Q) + attn, lay.ln1.gamma, lay.ln1.beta)
    expected = F.layer_norm(F.ffn(q1, lay.ffn) + q1, lay.ln2.gamma, lay.ln2.beta)
    np.testing.assert_allclose(mha_enc_forward(lay, Q, K, V).data, expected.data, atol=1e-6)


def test_two_layer_norms_are_distinct_parameters():
    lay = layer(SAG_MHA_ENC)
    ids = {id(lay.ln_self.gamma), id(lay.inner.ln1.gamma), id(lay.inner.ln2.gamma)}
    assert len(ids) == 3


@pytest.mark.parametrize("kind", [MHA_ENC, SAG_MHA_ENC])
def test_eval_is_deterministic(rng, kind):
    lay = layer(kind, p=0.3)
    Q, K, V = inputs(rng)
    np.testing.assert_array_equal(lay(Q, K, V).data, lay(Q, K, V).data)


@pytest.mark.parametrize("kind", [MHA_ENC, SAG_MHA_ENC])
def test_train_mode_is_seeded(rng, kind):
    block = CmEncBlock(kind, 2, 8, 2, np.random.default_rng(1), dropout_p=0.3)
    Q, K, V = inputs(rng)
    a = block(Q, K, V, mode="train", rng=RngState(4)).data
    b = block(Q, K, V, mode="train", rng=RngState(4)).data
    c = block(Q, K, V, mode="train", rng=RngState(5)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("kind", [MHA_ENC, SAG_MHA_ENC])
def test_masked_junk_keys_change_nothing(rng, kind):
    block = CmEncBlock(kind, 2, 8, 2, np.random.default_rng(2), dropout_p=0.0, dtype=np.float64)
    Q, K, V = inputs(rng)
    junk = 1e3 * rng.normal(size=(4, 8))
    mask = np.r_[np.ones(5, bool), np.zeros(4, bool)]
    base = block(Q, K, V).data
    padded = block(Q, np.vstack([K, junk]), np.vstack([V, junk]), mask).data
    np.testing.assert_allclose(padded, base, atol=1e-5)


@pytest.mark.parametrize("kind", [MHA_ENC, SAG_MHA_ENC])
def test_single_layer_block_equals_its_layer(rng, kind):
    block = CmEncBlock(kind, 1, 8, 2, np.random.default_rng(3))
    Q, K, V = inputs(rng)
    direct = block.layers[0](Q, K, V).data
    assert cm_enc_forward(block, Q, K, V).data.tobytes() == direct.tobytes()


class _Spy:
    """Wraps a layer and records the arguments it is called with."""

    def __init__(self, inner, log):
        self.inner, self.log = inner, log

    def __call__(self, q, k, v, *rest):
        self.log.append(tuple(F.to_tensor(a).data.copy() for a in (q, k, v)))
        return self.inner(q, k, v, *rest)


@pytest.mark.parametrize("kind", [MHA_ENC, SAG_MHA_ENC])
def test_every_layer_sees_the_same_keys_and_values(rng, kind):
    block = CmEncBlock(kind, 4, 8, 2, np.random.default_rng(4))
    seen, trace = [], []
    block.layers = [_Spy(lay, seen) for lay in block.layers]
    Q, K, V = inputs(rng)
    out = cm_enc_forward(block, Q, K, V, trace=trace)
    assert len(seen) == len(trace) == 4
    for i, (q_in, k_in, v_in) in enumerate(seen):
        np.testing.assert_array_equal(k_in, seen[0][1])
        np.testing.assert_array_equal(v_in, seen[0][2])
        np.testing.assert_array_equal(trace[i][1], k_in)
        np.testing.assert_array_equal(trace[i][2], v_in)
        if i:
            np.testing.assert_array_equal(q_in, trace[i - 1][3])
    np.testing.assert_array_equal(out.data, trace[-1][3])


def test_full_scale_block_shape():
    block = CmEncBlock(MHA_ENC, 4, 512, 8, np.random.default_rng(0))
    r = np.random.default_rng(1)
    out = block(r.normal(size=(49, 512)), r.normal(size=(512, 512)), r.normal(size=(512, 512)))
    assert out.shape == (49, 512)


def test_block_validation():
    with pytest.raises(ValueError):
        CmEncBlock("pre-norm", 2, 8, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        CmEncBlock(MHA_ENC, 0, 8, 2, np.random.default_rng(0))


@pytest.mark.parametrize("kind", [MHA_ENC, SAG_MHA_ENC])
def test_stack_grad_check(kind):
    r = np.random.default_rng(21)
    block = CmEncBlock(kind, 2, 16, 2, np.random.default_rng(5), dropout_p=0.0, dtype=np.float64)
    for name, p in block.named_parameters():
        if name.endswith(("gamma", "beta")) or name.split("/")[-1].startswith("b"):
            p.data = p.data + r.normal(scale=0.1, size=p.shape)
    Q, K, V = r.normal(size=(4, 16)), r.normal(size=(6, 16)), r.normal(size=(6, 16))
    mask = np.array([1, 1, 1, 1, 0, 1], dtype=bool)
    w = r.normal(scale=0.01, size=(4, 16))  # keeps |f| small; see mcf.gradcheck
    report = grad_check(lambda: (block(Q, K, V, mask) * w).sum(), dict(block.named_parameters()),
                        max_entries=12)
    assert report.passed(1e-4), report.lines()
