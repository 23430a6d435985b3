import numpy as np
import pytest
import torch

from gradcases import MODEL_CASES, toy_inputs, toy_spec
from patchcast.dataset import ForecastTask, make_batches
from patchcast.errors import ConfigError, ShapeError
from patchcast.models import (
    CANONICAL_SPECS,
    ModelSpec,
    build_model,
    canonical_spec,
    forward_forecast,
)
from patchcast.nn import DTYPE, TransformerStack, init_parameters
from patchcast.params import ParamStore, load_into


@pytest.mark.parametrize("case", sorted(MODEL_CASES))
@pytest.mark.parametrize("seed", [0, 1])
def test_model_gradients_match_finite_differences(case, seed):
    assert MODEL_CASES[case](seed) < 1e-5


@pytest.mark.parametrize(
    "kw",
    [
        dict(backbone="decoder_only"),
        dict(backbone="encoder_decoder", adapter="mlp2", output="mlp2"),
        dict(backbone=None, expand=True),
        dict(architecture="mqcnn", backbone=None),
    ],
)
def test_zero_weights_give_zero_grid(kw):
    model = build_model(toy_spec(**kw), seed=0)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    out = model(*toy_inputs(0, batch=3))
    assert out.shape == (3, 2, 2)
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("name", sorted(CANONICAL_SPECS))
def test_rows_are_independent(name):
    kw = dict(CANONICAL_SPECS[name])
    model = build_model(toy_spec(**kw), seed=1)
    xt, xf, xs, ff = toy_inputs(1, batch=3)
    full = model(xt, xf, xs, ff)
    dup = model(*(torch.cat([a, a[:1]]) for a in (xt, xf, xs, ff)))
    assert torch.allclose(dup[:3], full, atol=1e-12)
    assert torch.allclose(dup[3], full[0], atol=1e-12)
    single = model(xt[1:2], xf[1:2], xs[1:2], ff[1:2])
    assert torch.allclose(single[0], full[1], atol=1e-12)


def test_empty_backbone_equals_no_backbone():
    with_stack = build_model(toy_spec(backbone="decoder_only", n_layers=0), seed=2)
    without = build_model(toy_spec(backbone=None), seed=5)
    with torch.no_grad():
        with_stack.backbone.pos_emb.zero_()
    task_params = ParamStore.from_module(with_stack).subset("adapter.")
    load_into(without, task_params)
    load_into(without, ParamStore.from_module(with_stack).subset("head."))
    inputs = toy_inputs(4, batch=4)
    assert torch.equal(with_stack(*inputs), without(*inputs))


def test_future_features_switch():
    model = build_model(toy_spec(backbone=None, use_future=False), seed=0)
    xt, xf, xs, ff = toy_inputs(0)
    assert torch.equal(model(xt, xf, xs, ff), model(xt, xf, xs, ff + 5.0))
    model = build_model(toy_spec(backbone=None, use_future=True), seed=0)
    assert not torch.equal(model(xt, xf, xs, ff), model(xt, xf, xs, ff + 5.0))


def test_mqcnn_kernel_one_reads_only_last_step():
    model = build_model(toy_spec(architecture="mqcnn", backbone=None, kernel_size=1, dilations=(1,)), seed=0)
    xt, xf, xs, ff = toy_inputs(0)
    enc = model.encode(xt, xf)
    xt2, xf2 = xt.clone(), xf.clone()
    xt2[:, :-1] += 3.0
    xf2[:, :-1] -= 1.0
    assert torch.equal(model.encode(xt2, xf2), enc)
    # one kernel-1 conv is an affine map of the last step
    conv = model.mqcnn.convs[0]
    last = torch.cat([xt[:, -1:], xf[:, -1]], dim=1)
    assert torch.allclose(enc, last @ conv.weight[0] + conv.bias, atol=1e-12)


def test_mqcnn_receptive_field():
    spec = toy_spec(architecture="mqcnn", backbone=None, context_length=20, kernel_size=2, dilations=(1, 2, 4))
    model = build_model(spec, seed=3)
    assert model.receptive_field == 7
    xt, xf, xs, ff = toy_inputs(0, spec=spec)
    enc = model.encode(xt, xf)
    for t in range(20):
        xt2 = xt.clone()
        xt2[:, t] += 1.0
        changed = not torch.allclose(model.encode(xt2, xf), enc, atol=0, rtol=0)
        if t < 20 - 1 - 7:
            assert not changed, t
        else:
            assert changed, t


def _trainable(kind, freeze="adapter_and_layer_norms"):
    m = build_model(toy_spec(backbone=kind, freeze=freeze), seed=0)
    return {n for n, p in m.named_parameters() if p.requires_grad}


def test_freeze_policies_nest():
    for kind in ("decoder_only", "encoder_only", "encoder_decoder", "decoder_of_enc_dec"):
        a = _trainable(kind, "adapter_only")
        b = _trainable(kind, "adapter_and_layer_norms")
        c = _trainable(kind, "all_trainable")
        assert a < b < c
        assert a == {"adapter.weight", "adapter.bias", "head.weight", "head.bias"}


def test_enc_dec_variants_differ_by_omitted_stack():
    full = _trainable("encoder_decoder")
    enc = _trainable("encoder_only")
    dec = _trainable("decoder_of_enc_dec")
    assert full - enc == {n for n in full if n.startswith("backbone.decoder.")}
    assert full - dec == {n for n in full if n.startswith("backbone.encoder.")}
    assert "backbone.decoder.blocks.0.ln_cross.weight" in dec
    assert not any("ln_cross" in n for n in _trainable("decoder_only"))


def test_pretrained_backbone_loaded_and_frozen():
    donor = TransformerStack("encoder_decoder", 1, 8, 2, 16, 8)
    init_parameters(donor, 11)
    weights = ParamStore.from_module(donor).with_prefix("backbone.")
    model = build_model(toy_spec(backbone="encoder_only"), backbone_weights=weights, seed=0)
    for name, p in model.named_parameters():
        if name.startswith("backbone."):
            assert torch.equal(p, weights[name]), name
    assert not model.backbone.encoder.blocks[0].attn.q.weight.requires_grad
    with pytest.raises(ConfigError):
        build_model(toy_spec(backbone=None), backbone_weights=weights)
    with pytest.raises(ConfigError):
        small = ParamStore.from_module(TransformerStack("decoder_only", 1, 8, 2, 16, 8)).with_prefix("backbone.")
        build_model(toy_spec(backbone="encoder_only"), backbone_weights=small)


def test_seeded_init_is_deterministic():
    a = build_model(toy_spec(), seed=9).param_store()
    b = build_model(toy_spec(), seed=9).param_store()
    c = build_model(toy_spec(), seed=10).param_store()
    assert a.bit_equal(b)
    assert not a.bit_equal(c)


def test_gradient_shapes_match_tensors():
    model = build_model(toy_spec(backbone="encoder_decoder", freeze="all_trainable"), seed=0)
    model(*toy_inputs(0)).sum().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name


def test_forward_on_dataset_batch(small_panel):
    task = ForecastTask.spanning(small_panel.n_periods, 24, (1, 2, 4, 8))
    spec = canonical_spec("fpt_ln_linear").for_data(small_panel, task)
    model = build_model(spec, seed=0)
    batch = make_batches(small_panel, task, 5)[0]
    grid = forward_forecast(model, batch)
    assert grid.numpy().shape == (5, 4, 2)
    assert grid.values.dtype == DTYPE


def test_context_length_mismatch():
    model = build_model(toy_spec(backbone=None), seed=0)
    xt, xf, xs, ff = toy_inputs(0)
    with pytest.raises(ShapeError):
        model(xt[:, 1:], xf[:, 1:], xs, ff)


@pytest.mark.parametrize(
    "kw",
    [
        dict(backbone="transformer"),
        dict(adapter="conv"),
        dict(freeze="half"),
        dict(heads=3),
        dict(max_positions=2),
        dict(architecture="rnn"),
        dict(architecture="mqcnn", dilations=(1, 0)),
    ],
)
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        toy_spec(**kw)


def test_spec_round_trip_and_unknown_keys():
    spec = canonical_spec("fpt_ln_mlp")
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        ModelSpec.from_dict({"colour": "red"})
    with pytest.raises(ConfigError):
        canonical_spec("gpt5")


def test_canonical_parameter_counts():
    # adapter 132 -> 64, head (4 patches x 64 + 4 x 2 future) -> 8
    model = build_model(canonical_spec("fpt_ln_linear"), seed=0)
    ps = model.param_store()
    total = sum(p.numel() for p in model.parameters())
    train = sum(p.numel() for n, p in model.named_parameters() if ps.trainable[n])
    task = (132 * 64 + 64) + (264 * 8 + 8)
    assert train - task == 5 * 2 * 64  # four block norms + final norm
    assert total - train == 101120 - 640
    assert np.isclose(total, 101120 + task)
