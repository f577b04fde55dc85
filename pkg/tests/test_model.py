import numpy as np
import pytest

from mcf import functional as F
from mcf.encoders import MHA_ENC, SAG_MHA_ENC
from mcf.model import (FULL_GEOMETRY, TOY_GEOMETRY, McfConfig, McfModel, StreamBatch, check_geometry,
                       expected_parameter_count, foreground_stream, fuse, heads_forward, mcf_forward,
                       project_stream, visual_stream)
from mcf.nn import Linear
from mcf.tensor import DimensionError, RngState, Tensor
from mcf.training import Adam, emotic_loss

TOY = dict(n_layers=2, heads=2, d_model=16, **TOY_GEOMETRY)


def toy_model(variant=MHA_ENC, task="multilabel_cont", dtype=np.float32, **kw):
    return McfModel(McfConfig(variant=variant, task=task, **{**TOY, **kw}), dtype=dtype)


def toy_batch(c, rng, batch=3):
    mask = np.ones((batch, c.t_fg), dtype=bool)
    mask[0, 3:] = False
    return StreamBatch(rng.normal(size=(batch, c.t_pe, c.d_pe)).astype(np.float32),
                       rng.normal(size=(batch, c.t_fg, c.d_fg)).astype(np.float32),
                       rng.normal(size=(batch, c.t_vs, c.d_vs)).astype(np.float32), mask)


def degenerate(block):
    for layer in block.layers:
        inner = getattr(layer, "inner", layer)
        inner.mha.W_o.data[...] = 0
        inner.mha.b_o.data[...] = 0
        for p in inner.ffn.parameters():
            p.data[...] = 0
        if inner is not layer:
            layer.self_mha.W_o.data[...] = 0
            layer.self_mha.b_o.data[...] = 0


# -- adapters ----------------------------------------------------------------------
def test_square_adapter_is_identity_at_init(rng):
    x = rng.normal(size=(4, 16)).astype(np.float32)
    np.testing.assert_array_equal(project_stream(Tensor(x), Linear(16, 16, rng, identity=True)).data, x)


def test_frozen_adapter_keeps_zero_grad(rng):
    model = toy_model()
    model.set_frozen(["pe_adapter"])
    out = mcf_forward(model, toy_batch(model.config, rng))
    (out.disc_logits.sum() + out.cont.sum()).backward()
    assert np.all(model.pe_adapter.W.grad == 0) and np.all(model.pe_adapter.b.grad == 0)
    assert np.any(model.fg_adapter.W.grad != 0)


def test_full_width_adapter(rng):
    out = project_stream(Tensor(rng.normal(size=(49, 512))), Linear(512, 768, rng))
    assert out.shape == (49, 768)


# -- streams ---------------------------------------------------------------------------
@pytest.mark.parametrize("variant", [MHA_ENC, SAG_MHA_ENC])
def test_stream_shapes(rng, variant):
    model = toy_model(variant)
    b = toy_batch(model.config, rng)
    assert foreground_stream(model, b).shape == (3, 4, 16)
    assert visual_stream(model, b).shape == (3, 4, 16)


def test_fg_padding_is_invisible(rng):
    model = toy_model(dtype=np.float64)
    c = model.config
    b = toy_batch(c, rng)
    padded_model = McfModel(McfConfig(**{**c.to_dict(), "t_fg": c.t_fg + 3}), dtype=np.float64)
    padded_model.load_state_dict(model.state_dict())
    junk = 50 * rng.normal(size=(3, 3, c.d_fg))
    padded = StreamBatch(b.e_pe, np.concatenate([b.e_fg, junk], axis=1), b.e_vs,
                         np.concatenate([b.fg_mask, np.zeros((3, 3), bool)], axis=1))
    np.testing.assert_allclose(foreground_stream(padded_model, padded).data,
                               foreground_stream(model, b).data, atol=1e-5)


def test_degenerate_fg_block_reduces_to_layer_norm(rng):
    model = toy_model(dtype=np.float64)
    degenerate(model.fg_block)
    b = toy_batch(model.config, rng)
    x = project_stream(Tensor(b.e_pe), model.pe_adapter)
    out = foreground_stream(model, b).data
    chain = x
    for layer in model.fg_block.layers:
        chain = layer.ln2(layer.ln1(chain))
    np.testing.assert_allclose(out, chain.data, atol=1e-12)
    # each extra LN pass moves values by about |x_hat| * eps / 2 (see test_tensor)
    once = model.fg_block.layers[0].ln1(x).data
    np.testing.assert_allclose(out, once, atol=4 * 3 * 5e-6)


def test_streams_have_separate_parameters(rng):
    model = toy_model()
    b = toy_batch(model.config, rng)
    before = visual_stream(model, b).data.copy()
    for p in model.fg_block.parameters():
        p.data += 1.0
    np.testing.assert_array_equal(visual_stream(model, b).data, before)


def test_full_scene_token_count_accepted(rng):
    for d, heads in ((512, 8), (768, 8)):
        model = McfModel(McfConfig(n_layers=1, heads=heads, d_model=d,
                                   **{**FULL_GEOMETRY, "t_fg": 8}))
        b = StreamBatch(rng.normal(size=(49, 512)), rng.normal(size=(8, 768)),
                        rng.normal(size=(197, 768)), np.ones(8, bool))
        assert visual_stream(model, b).shape == (49, d)


# -- fusion and heads ----------------------------------------------------------------------
def test_fusion_widths():
    assert McfConfig(d_model=512).fusion_width == 1024
    assert McfConfig(d_model=768, heads=8).fusion_width == 1536
    assert fuse(Tensor(np.zeros((49, 512))), Tensor(np.zeros((49, 512)))).shape == (1024,)


def test_constant_streams_fuse_to_their_constants():
    c1, c2 = np.arange(4.0), -np.arange(4.0)
    out = fuse(Tensor(np.tile(c1, (5, 1))), Tensor(np.tile(c2, (5, 1))))
    np.testing.assert_allclose(out.data, np.r_[c1, c2], atol=1e-15)


def test_swapping_stream_parameters_swaps_fusion_halves(rng):
    geo = dict(TOY_GEOMETRY, t_vs=TOY_GEOMETRY["t_fg"])
    model = toy_model(dtype=np.float64, **geo)
    b = toy_batch(model.config, rng)
    b.fg_mask[:] = True
    fused = fuse(foreground_stream(model, b), visual_stream(model, b)).data
    model.fg_block, model.vs_block = model.vs_block, model.fg_block
    model.fg_adapter, model.vs_adapter = model.vs_adapter, model.fg_adapter
    swapped_batch = StreamBatch(b.e_pe, b.e_vs, b.e_fg, b.fg_mask)
    swapped = fuse(foreground_stream(model, swapped_batch), visual_stream(model, swapped_batch)).data
    np.testing.assert_array_equal(swapped, np.concatenate([fused[:, 16:], fused[:, :16]], axis=-1))


def test_head_shapes_for_both_tasks(rng):
    emotic = McfModel(McfConfig(n_layers=1, heads=2, d_model=16, n_disc=26, **TOY_GEOMETRY))
    out = heads_forward(emotic, Tensor(rng.normal(size=(2, 32))))
    assert out.disc_logits.shape == (2, 26) and out.cont.shape == (2, 3)
    caer = McfModel(McfConfig(n_layers=1, heads=2, d_model=16, task="single_label", **TOY_GEOMETRY))
    out = heads_forward(caer, Tensor(rng.normal(size=(2, 32))))
    assert out.disc_logits.shape == (2, 7) and out.cont is None


def test_zero_head_weights_emit_biases(rng):
    model = toy_model()
    for head in (model.disc_head, model.cont_head):
        head.out.W.data[...] = 0
        head.out.b.data[...] = rng.normal(size=head.out.b.shape)
    out = heads_forward(model, Tensor(rng.normal(size=(32,))))
    np.testing.assert_array_equal(out.disc_logits.data, model.disc_head.out.b.data)
    np.testing.assert_array_equal(out.cont.data, model.cont_head.out.b.data)


def test_heads_reject_wrong_width():
    with pytest.raises(DimensionError):
        heads_forward(toy_model(), Tensor(np.zeros(17)))


# -- whole model ------------------------------------------------------------------------------
@pytest.mark.parametrize("variant", [MHA_ENC, SAG_MHA_ENC])
def test_batch_of_one_matches_batched(rng, variant):
    model = toy_model(variant)
    b = toy_batch(model.config, rng)
    full = mcf_forward(model, b).disc_logits.data
    for i in range(3):
        one = StreamBatch(b.e_pe[i:i + 1], b.e_fg[i:i + 1], b.e_vs[i:i + 1], b.fg_mask[i:i + 1])
        assert mcf_forward(model, one).disc_logits.data[0].tobytes() == full[i].tobytes()


def test_eval_mode_is_bitwise_repeatable(rng):
    model = toy_model(dropout_p=0.3)
    b = toy_batch(model.config, rng)
    assert (mcf_forward(model, b).disc_logits.data.tobytes()
            == mcf_forward(model, b).disc_logits.data.tobytes())
    t1 = mcf_forward(model, b, "train", RngState(1)).disc_logits.data
    t2 = mcf_forward(model, b, "train", RngState(1)).disc_logits.data
    np.testing.assert_array_equal(t1, t2)


def test_geometry_mismatch_names_field(rng):
    model = toy_model()
    b = toy_batch(model.config, rng)
    bad = StreamBatch(b.e_pe, b.e_fg[..., :8], b.e_vs, b.fg_mask)
    with pytest.raises(DimensionError, match="d_fg"):
        check_geometry(model.config, bad)


def test_visual_only_dependence_when_fg_path_is_cut(rng):
    model = toy_model(dtype=np.float64)
    degenerate(model.fg_block)
    b = toy_batch(model.config, rng)
    b.e_fg[:] = 0
    base = mcf_forward(model, b).disc_logits.data
    b.e_fg[:] = rng.normal(size=b.e_fg.shape)
    np.testing.assert_array_equal(mcf_forward(model, b).disc_logits.data, base)
    b.e_vs[:] += 1.0
    assert not np.array_equal(mcf_forward(model, b).disc_logits.data, base)


def test_frozen_person_adapter_survives_optimizer_steps(rng):
    model = toy_model()
    model.set_frozen(["pe_adapter"])
    before = model.pe_adapter.W.data.copy()
    opt = Adam(model.parameters())
    b = toy_batch(model.config, rng)
    y_disc, y_cont = (rng.random((3, 26)) > 0.5).astype(np.float32), rng.random((3, 3))
    for _ in range(5):
        model.zero_grad()
        out = mcf_forward(model, b)
        emotic_loss(out.disc_logits, out.cont, y_disc, y_cont).backward()
        opt.step(1e-2)
    assert model.pe_adapter.W.data.tobytes() == before.tobytes()


def test_emotic_mha_parameter_count():
    config = McfConfig(variant=MHA_ENC, n_layers=4, heads=8, d_model=512, d_ff=1024)
    assert expected_parameter_count(config) == 17_902_109
    assert McfModel(config).num_parameters() == 17_902_109


@pytest.mark.parametrize("variant", [MHA_ENC, SAG_MHA_ENC])
@pytest.mark.parametrize("task", ["multilabel_cont", "single_label"])
@pytest.mark.parametrize("streams,hidden", [("both", 0), ("fg", 0), ("vs", 8), ("both", 8)])
def test_closed_form_count_matches_construction(variant, task, streams, hidden):
    c = McfConfig(variant=variant, task=task, streams=streams, head_hidden=hidden, **TOY)
    assert McfModel(c).num_parameters() == expected_parameter_count(c)


def test_config_validation():
    with pytest.raises(ValueError):
        McfConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        McfConfig(variant="prenorm")
    with pytest.raises(ValueError):
        McfConfig(dropout_p=1.0)
    assert McfConfig(task="single_label").n_disc == 7
    assert McfConfig().n_disc == 26
