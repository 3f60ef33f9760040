import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from mcvd.denoiser import (ConditioningMode, Denoiser, DenoiserConfig, LinearToyDenoiser, count_params,
                           denoise_forward, embed_noise_level, noise_embedding)
from mcvd.masking import BlockLayout

LAYOUT = BlockLayout(1, 2, 1, 16, 16, 1)


def small_cfg(mode="concat", **kw):
    base = dict(base_width=8, channel_multipliers=(1, 2), attention_resolutions=(8,), embedding_dim=16,
                groups=4, cond_width=8, seed=3)
    base.update(kw)
    return DenoiserConfig(LAYOUT, mode, **base)


def inputs(batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    xt = torch.randn(batch, 2, 1, 16, 16, generator=g)
    past = torch.rand(batch, 1, 1, 16, 16, generator=g)
    future = torch.rand(batch, 1, 1, 16, 16, generator=g)
    return xt, past, future, torch.full((batch,), 0.3, dtype=torch.float64)


def test_embedding_at_zero():
    e = noise_embedding(0.0, 10)
    assert torch.equal(e[0::2], torch.ones(5, dtype=torch.float64))
    assert torch.equal(e[1::2], torch.zeros(5, dtype=torch.float64))
    assert float((e**2).sum()) == 5.0


def test_embedding_scalar_values():
    e = noise_embedding(1.0, 4, 10000.0)
    expected = [math.cos(0.01), math.sin(0.01), math.cos(1e-4), math.sin(1e-4)]
    assert e.tolist() == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("D", [0, 1, 7])
def test_embedding_rejects_odd_dimension(D):
    with pytest.raises(ValueError):
        noise_embedding(0.5, D)


@settings(max_examples=100, deadline=None)
@given(t=st.floats(0.0, 1.0), half=st.integers(1, 128))
def test_embedding_norm(t, half):
    e = noise_embedding(t, 2 * half)
    assert float((e**2).sum()) == pytest.approx(half, rel=1e-12)


def test_embedding_vectorized_matches_scalar():
    t = torch.tensor([0.0, 0.25, 1.0], dtype=torch.float64)
    e = noise_embedding(t, 8)
    for i in range(3):
        assert torch.equal(e[i], noise_embedding(float(t[i]), 8))


def test_embed_noise_level_properties():
    m = Denoiser(small_cfg())
    a, b = embed_noise_level(0.1, m), embed_noise_level(0.1, m)
    assert torch.equal(a, b)
    assert not torch.allclose(embed_noise_level(0.1, m), embed_noise_level(0.9, m))
    with torch.no_grad():
        m.emb_fc2.weight.zero_()
    assert torch.equal(embed_noise_level(0.7, m)[0], m.emb_fc2.bias)


@pytest.mark.parametrize("mode", list(ConditioningMode))
def test_output_shape(mode):
    m = Denoiser(small_cfg(mode, zero_init_output=False))
    xt, past, future, t = inputs()
    out = denoise_forward(xt, past, future, t, m)
    assert out.shape == xt.shape
    assert torch.isfinite(out).all()


@pytest.mark.parametrize("mode", list(ConditioningMode))
def test_forward_is_bit_deterministic(mode):
    xt, past, future, t = inputs()
    out1 = Denoiser(small_cfg(mode, zero_init_output=False))(xt, past, future, t)
    out2 = Denoiser(small_cfg(mode, zero_init_output=False))(xt, past, future, t)
    assert torch.equal(out1, out2)


def test_default_init_predicts_zero_noise():
    m = Denoiser(small_cfg())
    xt, past, future, t = inputs()
    assert torch.equal(m(xt, past, future, t), torch.zeros_like(xt))


@pytest.mark.parametrize("mode", list(ConditioningMode))
def test_conditioning_changes_prediction(mode):
    m = Denoiser(small_cfg(mode, zero_init_output=False))
    xt, past, future, t = inputs()
    with torch.no_grad():
        masked = m(xt, past * 0, future * 0, t)
        masked_again = m(xt, torch.zeros_like(past), torch.zeros_like(future), t)
        cond = m(xt, past, future, t)
    assert torch.equal(masked, masked_again)
    assert not torch.allclose(masked, cond)


def test_concat_channel_order():
    m = Denoiser(small_cfg())
    seen = {}
    m.conv_in.register_forward_pre_hook(lambda mod, inp: seen.update(x=inp[0]))
    B = 1
    past = torch.full((B, 1, 1, 16, 16), 10.0)
    xt = torch.stack([torch.full((1, 16, 16), 20.0), torch.full((1, 16, 16), 21.0)])[None]
    future = torch.full((B, 1, 1, 16, 16), 30.0)
    m(xt, past, future, torch.zeros(B, dtype=torch.float64))
    x = seen["x"]
    assert x.shape == (B, 4, 16, 16)
    assert [float(x[0, c, 0, 0]) for c in range(4)] == [10.0, 20.0, 21.0, 30.0]


def test_spatin_trunk_sees_only_current_frames():
    m = Denoiser(small_cfg("spatin"))
    assert m.conv_in.in_channels == 2
    assert m.cond_encoder[0].in_channels == 2


def test_multichannel_layout_stacks_frames_then_channels():
    lay = BlockLayout(1, 1, 0, 8, 8, 3)
    m = Denoiser(DenoiserConfig(lay, base_width=4, channel_multipliers=(1,), attention_resolutions=(), groups=2,
                                cond_width=4, embedding_dim=8))
    seen = {}
    m.conv_in.register_forward_pre_hook(lambda mod, inp: seen.update(x=inp[0]))
    past = torch.arange(3.0).reshape(1, 1, 3, 1, 1).expand(1, 1, 3, 8, 8)
    xt = (10 + torch.arange(3.0)).reshape(1, 1, 3, 1, 1).expand(1, 1, 3, 8, 8)
    m(xt, past, torch.zeros(1, 0, 3, 8, 8), 0.5)
    assert seen["x"][0, :, 0, 0].tolist() == [0.0, 1.0, 2.0, 10.0, 11.0, 12.0]


def test_shape_and_value_errors():
    m = Denoiser(small_cfg())
    xt, past, future, t = inputs()
    with pytest.raises(ValueError):
        m(xt[:, :1], past, future, t)
    with pytest.raises(ValueError):
        m(xt, past, future[:, :0], t)
    bad = xt.clone()
    bad[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        m(bad, past, future, t)


@pytest.mark.parametrize("kw", [
    dict(embedding_dim=7),
    dict(attention_resolutions=(2,)),
    dict(groups=3),
    dict(channel_multipliers=()),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small_cfg(**kw)


def test_config_round_trip():
    cfg = small_cfg("spatin")
    again = DenoiserConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert count_params(Denoiser(again)) == count_params(Denoiser(cfg))


def test_linear_toy_gradient_closed_form():
    torch.manual_seed(0)
    lay = BlockLayout(1, 2, 1, 4, 4, 1)
    m = LinearToyDenoiser(lay).double()
    xt = torch.randn(3, 2, 1, 4, 4, dtype=torch.float64)
    past = torch.randn(3, 1, 1, 4, 4, dtype=torch.float64)
    future = torch.randn(3, 1, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(xt)
    t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    loss = (eps - m(xt, past, future, t)).pow(2).mean()
    loss.backward()
    # residual r = eps - (W z + b + w_t t); dL/dW = -2/N sum r z^T
    z = torch.cat([past.flatten(1, 2), xt.flatten(1, 2), future.flatten(1, 2)], 1)
    with torch.no_grad():
        r = (eps - m(xt, past, future, t)).flatten(1, 2)
    N = r.numel()
    gW = -2.0 / N * torch.einsum("bohw,bchw->oc", r, z)
    gb = -2.0 / N * r.sum((0, 2, 3))
    gt = -2.0 / N * torch.einsum("bohw,b->o", r, t)
    assert torch.allclose(m.weight.grad, gW, rtol=1e-12, atol=1e-14)
    assert torch.allclose(m.bias.grad, gb, rtol=1e-12, atol=1e-14)
    assert torch.allclose(m.t_weight.grad, gt, rtol=1e-12, atol=1e-14)
