import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from thermostereo.encoder import FeatureSet, ShallowEncoder, SizingError, build_pyramid, encode, encode_pair


def block_means(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape
    out = np.zeros((h // s, w // s))
    for i in range(h // s):
        for j in range(w // s):
            out[i, j] = img[i * s:(i + 1) * s, j * s:(j + 1) * s].mean()
    return out


def test_constant_image_pyramid():
    levels = build_pyramid(torch.full((1, 1, 32, 32), 0.3))
    assert sorted(levels) == [1, 2, 4, 8, 16]
    for s, lvl in levels.items():
        assert lvl.shape[-2:] == (32 // s, 32 // s)
        torch.testing.assert_close(lvl, torch.full_like(lvl, 0.3))


def test_checkerboard_level2_is_half():
    img = torch.tensor([[0.0, 1.0], [1.0, 0.0]]).repeat(16, 16)[None, None]
    lvl2 = build_pyramid(img)[2]
    torch.testing.assert_close(lvl2, torch.full_like(lvl2, 0.5))


def test_level4_matches_block_mean_loop(rng):
    img = rng.random((64, 64))
    lvl4 = build_pyramid(torch.from_numpy(img)[None, None])[4][0, 0].numpy()
    np.testing.assert_allclose(lvl4, block_means(img, 4), atol=1e-12)


def test_level1_is_input_unchanged(rng):
    img = torch.from_numpy(rng.random((1, 1, 32, 48)))
    assert torch.equal(build_pyramid(img)[1], img)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_pyramid_preserves_global_mean(h, w, seed):
    img = torch.from_numpy(np.random.default_rng(seed).random((1, 1, 16 * h, 16 * w)))
    levels = build_pyramid(img)
    for lvl in levels.values():
        assert abs(float(lvl.mean() - img.mean())) < 1e-6


@pytest.mark.parametrize("shape,dim", [((1, 1, 40, 32), "height"), ((1, 1, 32, 40), "width")])
def test_sizing_error_names_dimension(shape, dim):
    with pytest.raises(SizingError, match=dim):
        build_pyramid(torch.zeros(shape))


def test_non_finite_input_rejected():
    img = torch.zeros(1, 1, 32, 32)
    img[0, 0, 3, 3] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        encode(ShallowEncoder(4, 8, 8, 8), img)


def test_zero_image_zero_bias_gives_zero_features():
    enc = ShallowEncoder(8, 8, 8, 8)
    with torch.no_grad():
        for m in enc.modules():
            if getattr(m, "bias", None) is not None and not isinstance(m, torch.nn.BatchNorm2d):
                m.bias.zero_()
    enc.eval()
    feats = encode(enc, torch.zeros(1, 1, 32, 32))
    for f in feats:
        assert torch.count_nonzero(f) == 0


def test_feature_shapes_64x80():
    enc = ShallowEncoder(8, 12, 16, 24)
    feats = encode(enc, torch.rand(2, 1, 64, 80))
    assert isinstance(feats, FeatureSet)
    assert feats.f4.shape == (2, 12, 16, 20)
    assert feats.f8.shape == (2, 16, 8, 10)
    assert feats.f16.shape == (2, 24, 4, 5)
    assert all(torch.isfinite(f).all() for f in feats)


def test_shift_equivariance_probe():
    torch.manual_seed(0)
    enc = ShallowEncoder(8, 8, 8, 8).eval()
    img = torch.rand(1, 1, 32, 128)
    shifted = torch.roll(img, 4, dims=-1)
    with torch.no_grad():
        f = encode(enc, img).f4
        g = encode(enc, shifted).f4
    # compare away from the image border and the wraparound seam
    margin = 8
    a = f[..., margin:-margin - 1]
    b = g[..., margin + 1:-margin]
    dev = float((a - b).abs().max())
    print(f"f4 shift equivariance: max interior deviation {dev:.3e}")
    assert dev < 1e-5


def test_encode_pair_shares_weights(rng):
    torch.manual_seed(1)
    enc = ShallowEncoder(4, 8, 8, 8)
    left = torch.from_numpy(rng.random((1, 1, 32, 32), dtype=np.float32))
    right = torch.from_numpy(rng.random((1, 1, 32, 32), dtype=np.float32))
    fl, fr = encode_pair(enc, left, right)
    el, er = encode(enc, left), encode(enc, right)
    for a, b in zip(fl + fr, el + er):
        assert torch.equal(a, b)
    sl, sr = encode_pair(enc, right, left)
    for a, b in zip(sl + sr, fr + fl):
        assert torch.equal(a, b)
    same_l, same_r = encode_pair(enc, left, left)
    for a, b in zip(same_l, same_r):
        assert torch.equal(a, b)


def test_encode_pair_rejects_mismatch():
    with pytest.raises(SizingError):
        encode_pair(ShallowEncoder(4, 8, 8, 8), torch.zeros(1, 1, 32, 32), torch.zeros(1, 1, 32, 48))


def test_encoder_gradient_finite_differences():
    torch.manual_seed(0)
    enc = ShallowEncoder(4, 8, 8, 8).double().eval()
    img = torch.rand(1, 1, 16, 16, dtype=torch.float64)

    def objective():
        return encode(enc, img).f4.sum()

    enc.zero_grad()
    objective().backward()
    step = 1e-4
    worst = 0.0
    for name, p in enc.named_parameters():
        flat = p.data.view(-1)
        # parameters of the 1/8 and 1/16 paths do not reach f4
        analytic = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
        for i in range(flat.numel()):
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + step
                up = float(objective())
                flat[i] = old - step
                down = float(objective())
                flat[i] = old
            numeric = (up - down) / (2 * step)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
            assert err <= 1e-3, f"{name}[{i}]: analytic {a} vs numeric {numeric}"
    print(f"encoder gradient check: worst relative error {worst:.2e}")
