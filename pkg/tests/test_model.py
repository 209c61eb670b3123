import pytest
import torch

from conftest import tiny_model_config
from thermostereo.config import ConfigError, ModelConfig
from thermostereo.model import build_model
from thermostereo.refinement import bilinear_upsample, convex_upsample


@pytest.fixture(scope="module")
def default_counts():
    return {v: build_model(ModelConfig(variant=v)).n_params for v in ("full", "no_se", "no_se_no_refine")}


def test_default_parameter_budget(default_counts):
    print({k: f"{v / 1e6:.3f}M" for k, v in default_counts.items()})
    assert 2.2e6 <= default_counts["full"] <= 4.2e6


def test_variants_strictly_remove_parameters(default_counts):
    assert default_counts["full"] > default_counts["no_se"] > default_counts["no_se_no_refine"]
    no_se = build_model(ModelConfig(variant="no_se"))
    assert not any(".se." in n for n, _ in no_se.named_parameters())
    assert build_model(ModelConfig(variant="no-se-no-refine")).refinement is None


def test_inconsistent_config_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(d_max=30)
    with pytest.raises(ConfigError):
        ModelConfig(variant="tiny")
    with pytest.raises(ConfigError):
        ModelConfig(volume_channels=(8, 8))


def test_output_shapes_and_sequence():
    torch.manual_seed(0)
    model = build_model(tiny_model_config())
    out = model(torch.rand(2, 1, 32, 48), torch.rand(2, 1, 32, 48))
    assert out.d_init.shape == (2, 1, 8, 12)
    assert out.d_final.shape == (2, 1, 32, 48)
    assert len(out.predictions) == 2 and out.predictions[-1] is out.d_final
    assert out.cost.shape == (2, 8, 8, 12)


def test_zero_init_full_is_convex_upsampled_init():
    torch.manual_seed(0)
    model = build_model(tiny_model_config())
    out = model(torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 32))
    assert torch.count_nonzero(out.d_delta) == 0
    assert torch.equal(out.d_final, convex_upsample(out.d_init, out.mask))
    assert torch.equal(out.predictions[0], out.d_final)


def test_zero_init_no_refine_is_bilinear():
    torch.manual_seed(0)
    model = build_model(tiny_model_config(variant="no_se_no_refine"))
    out = model(torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 32))
    assert torch.equal(out.d_final, bilinear_upsample(out.d_init, 4))
    assert len(out.predictions) == 1


def test_forward_deterministic():
    torch.manual_seed(0)
    model = build_model(tiny_model_config()).eval()
    left, right = torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(model(left, right).d_final, model(left, right).d_final)


def test_negative_final_disparity_is_possible():
    # the residual is signed; metrics clamp, the network does not
    torch.manual_seed(0)
    model = build_model(tiny_model_config()).eval()
    with torch.no_grad():
        model.refinement.head.delta.bias.fill_(-100.0)
        out = model(torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 32))
    assert (out.d_final < 0).any()


def test_end_to_end_gradient_finite_differences():
    torch.manual_seed(0)
    model = build_model(tiny_model_config(d_max=16)).double().eval()
    with torch.no_grad():
        # leave the zero-init start so the residual path carries gradient too
        for p in (model.refinement.head.delta.weight, model.refinement.head.mask.weight):
            p.normal_(0, 0.05)
    left = torch.rand(1, 1, 32, 32, dtype=torch.float64)
    right = torch.roll(left, -2, dims=-1)
    probe = model.encoder.block4[0].weight

    def objective():
        return model(left, right).d_final.mean()

    model.zero_grad()
    objective().backward()
    analytic = probe.grad.view(-1)
    flat = probe.data.view(-1)
    step = 1e-5
    checked = 0
    for i in range(0, flat.numel(), max(flat.numel() // 12, 1)):
        old = float(flat[i])
        with torch.no_grad():
            flat[i] = old + step
            up = float(objective())
            flat[i] = old - step
            down = float(objective())
            flat[i] = old
        numeric = (up - down) / (2 * step)
        a = float(analytic[i])
        assert abs(a - numeric) <= 1e-2 * max(abs(a), abs(numeric), 1e-7), (i, a, numeric)
        checked += 1
    assert checked >= 10
