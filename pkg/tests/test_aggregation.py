import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from thermostereo.aggregation import (Aggregation, AttentionMaps, CrossAttention16, InvertedResidual3d,
                                      MSCAttention, MultiScaleConv, SqueezeExcite, aggregate, apply_attention,
                                      cross_attention_16, msc_attention, se_gate)
from thermostereo.cost_volume import soft_argmin
from thermostereo.layers import count_parameters


def identity_conv_(conv):
    with torch.no_grad():
        conv.weight.zero_()
        n = min(conv.weight.shape[:2])
        conv.weight[range(n), range(n)] = 1.0
        conv.bias.zero_()


def test_cross_attention_zero_right_is_residual_identity():
    torch.manual_seed(0)
    m = CrossAttention16(6, 4)
    with torch.no_grad():
        m.value.bias.zero_()
    fl = torch.randn(2, 6, 3, 5)
    out = cross_attention_16(fl, torch.zeros_like(fl), m)
    assert torch.equal(out, fl)


def test_cross_attention_saturates_on_dominant_key():
    m = CrossAttention16(4, 4)
    for conv in (m.query, m.key, m.value):
        identity_conv_(conv)
    q = torch.tensor([1.0, 0.5, -0.5, 0.25])
    fl = q.view(1, 4, 1, 1).expand(1, 4, 3, 3).clone()
    fr = torch.randn(1, 4, 3, 3) * 0.1
    fr[0, :, 1, 2] = 1000 * q
    out = m(fl, fr)
    expected = fl + fr[0, :, 1, 2].view(1, 4, 1, 1)
    assert torch.allclose(out, expected, rtol=1e-5)


def test_cross_attention_weights_match_loop(rng):
    torch.manual_seed(0)
    m = CrossAttention16(3, 2).double()
    fl = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    fr = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    attn = m.attention_weights(fl, fr)[0].detach().numpy()
    wq, bq = m.query.weight[..., 0, 0].detach().numpy(), m.query.bias.detach().numpy()
    wk, bk = m.key.weight[..., 0, 0].detach().numpy(), m.key.bias.detach().numpy()
    pl = fl[0].numpy().reshape(3, -1)
    pr = fr[0].numpy().reshape(3, -1)
    for i in range(16):
        q = wq @ pl[:, i] + bq
        scores = np.array([q @ (wk @ pr[:, j] + bk) for j in range(16)]) / math.sqrt(2)
        p = np.exp(scores - scores.max())
        np.testing.assert_allclose(attn[i], p / p.sum(), atol=1e-5)


def test_cross_attention_shape_check():
    with pytest.raises(ValueError):
        CrossAttention16(4, 4)(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 3))


def test_msc_zero_input_gives_half_gate():
    m = MSCAttention((4, 6, 8), (3, 5, 7))
    with torch.no_grad():
        for p in m.parameters():
            if p.dim() == 1:
                p.zero_()
    maps = msc_attention(torch.zeros(1, 4, 8, 8), torch.zeros(1, 6, 4, 4), torch.zeros(1, 8, 2, 2), m)
    for a in maps:
        assert torch.count_nonzero(a) == 0
        assert torch.all(torch.sigmoid(a) == 0.5)


def test_msc_shapes():
    m = MSCAttention((4, 6, 8), (3, 5, 7))
    maps = m(torch.randn(2, 4, 16, 20), torch.randn(2, 6, 8, 10), torch.randn(2, 8, 4, 5))
    assert isinstance(maps, AttentionMaps)
    assert [tuple(a.shape) for a in maps] == [(2, 3, 16, 20), (2, 5, 8, 10), (2, 7, 4, 5)]


def test_msc_7x7_ones_hand_convolution():
    m = MultiScaleConv(1, 1)
    branch = m.branches[1]
    assert branch.kernel_size == (7, 7)
    with torch.no_grad():
        branch.weight.fill_(1.0)
        branch.bias.zero_()
    out = branch(torch.ones(1, 1, 16, 16))
    assert torch.all(out[..., 3:-3, 3:-3] == 49.0)


def test_se_gate_open_and_closed():
    se = SqueezeExcite(8, 4)
    x = torch.randn(2, 8, 3, 4, 5)
    with torch.no_grad():
        se.fc2.weight.zero_()
        se.fc2.bias.fill_(20.0)
    assert torch.allclose(se_gate(x, se), x, atol=1e-6)
    with torch.no_grad():
        se.fc2.bias.fill_(-200.0)
    assert torch.allclose(se_gate(x, se), torch.zeros_like(x), atol=1e-30)
    assert se_gate(x, None) is x


def test_se_matches_scalar_oracle(rng):
    torch.manual_seed(0)
    se = SqueezeExcite(4, 2).double()
    x = torch.from_numpy(rng.normal(size=(1, 4, 3, 5, 6)))
    out = se(x)[0].detach().numpy()
    w1, b1 = se.fc1.weight.detach().numpy(), se.fc1.bias.detach().numpy()
    w2, b2 = se.fc2.weight.detach().numpy(), se.fc2.bias.detach().numpy()
    pooled = [x[0, c].numpy().mean() for c in range(4)]
    hidden = [max(0.0, sum(w1[j, c] * pooled[c] for c in range(4)) + b1[j]) for j in range(2)]
    gates = [1 / (1 + math.exp(-(sum(w2[c, j] * hidden[j] for j in range(2)) + b2[c]))) for c in range(4)]
    for c in range(4):
        np.testing.assert_allclose(out[c], x[0, c].numpy() * gates[c], atol=1e-12)


def test_se_rejects_too_few_channels():
    with pytest.raises(ValueError):
        SqueezeExcite(3, 4)


def test_apply_attention_shape_check():
    with pytest.raises(ValueError):
        apply_attention(torch.zeros(1, 4, 3, 8, 8), torch.zeros(1, 4, 4, 4))


def make_inputs(d=8, h=16, w=16, chans=(4, 4, 8), seed=0):
    g = torch.Generator().manual_seed(seed)
    vol = torch.randn(2, d, h, w, generator=g)
    attn = AttentionMaps(torch.randn(2, chans[0], h, w, generator=g),
                         torch.randn(2, chans[1], h // 2, w // 2, generator=g),
                         torch.randn(2, chans[2], h // 4, w // 4, generator=g))
    return vol, attn


@settings(max_examples=8, deadline=None)
@given(d=st.integers(2, 10), h=st.sampled_from([4, 8, 12]), w=st.sampled_from([4, 8, 20]),
       use_se=st.booleans())
def test_aggregate_preserves_shape(d, h, w, use_se):
    agg = Aggregation((4, 4, 8), 1, 2, use_se)
    vol, attn = make_inputs(d, h, w)
    assert aggregate(vol, attn, agg).shape == vol.shape


def test_gated_off_encoders_probe():
    torch.manual_seed(0)
    feats = (4, 4, 8)
    msc = MSCAttention(feats, (4, 4, 8)).double()
    agg = Aggregation((4, 4, 8), 2, 2, True).double()
    with torch.no_grad():
        for m in msc.msc:
            m.proj.weight.zero_()
            m.proj.bias.fill_(-20.0)
    vol = torch.randn(1, 8, 16, 16, dtype=torch.float64)
    f4 = torch.randn(1, 4, 16, 16, dtype=torch.float64)
    f8 = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    f16 = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    out = aggregate(vol, msc_attention(f4, f8, f16, msc), agg)
    bound = float(out.detach().abs().max())
    print(f"gated-off aggregation output max |C| = {bound:.3e}")
    assert np.isfinite(bound) and bound < 10.0
    soft_argmin(out).sum().backward()
    for m in msc.msc:
        assert m.proj.weight.grad.abs().sum() > 0
        assert m.proj.bias.grad.abs().sum() > 0


def test_gradient_reaches_every_aggregation_parameter():
    torch.manual_seed(0)
    agg = Aggregation((8, 8, 8), 2, 2, True)
    vol, attn = make_inputs(8, 16, 16, (8, 8, 8))
    target = torch.rand(2, 1, 16, 16) * 7
    (soft_argmin(aggregate(vol, attn, agg)) - target).abs().mean().backward()
    dead = [n for n, p in agg.named_parameters() if p.grad is None or p.grad.abs().sum() == 0]
    assert not dead, dead


def test_se_off_removes_parameters_and_changes_output():
    torch.manual_seed(0)
    with_se = Aggregation((4, 4, 8), 2, 2, True)
    torch.manual_seed(0)
    without = Aggregation((4, 4, 8), 2, 2, False)
    assert count_parameters(without) < count_parameters(with_se)
    assert not any(".se." in n for n, _ in without.named_parameters())
    # copy every shared weight so only the gates differ
    without.load_state_dict({k: v for k, v in with_se.state_dict().items() if ".se." not in k})
    vol, attn = make_inputs(8, 8, 8)
    with_se.eval(), without.eval()
    assert not torch.allclose(with_se(vol, attn), without(vol, attn))


def test_aggregation_deterministic():
    agg = Aggregation((4, 4, 8), 2, 2, True).eval()
    vol, attn = make_inputs()
    assert torch.equal(agg(vol, attn), agg(vol, attn))


def test_inverted_residual_skip_only_when_shapes_allow():
    assert InvertedResidual3d(4, 4).residual
    assert not InvertedResidual3d(4, 4, stride=2).residual
    assert not InvertedResidual3d(4, 8).residual
