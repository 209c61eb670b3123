import numpy as np
import pytest
import torch

from thermostereo.config import ModelConfig, TrainConfig
from thermostereo.data.manifest import load_manifest, write_synthetic_dataset
from thermostereo.data.synthetic import SyntheticSceneSpec

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


def tiny_model_config(**kw) -> ModelConfig:
    """Narrow network for fast tests; same topology as the default."""
    base = dict(d_max=32, stem_channels=8, feat4_channels=8, feat8_channels=8, feat16_channels=8, attn_dim=8,
                volume_channels=(4, 4, 8), merge_channels=8, refine_channels=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    model = kw.pop("model", None) or tiny_model_config()
    base = dict(batch_size=2, total_steps=10, log_every=0, checkpoint_every=0)
    base.update(kw)
    return TrainConfig(model=model, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six 32x48 scenes with 20% sparse and dense gt on disk."""
    root = tmp_path_factory.mktemp("synth")
    spec = SyntheticSceneSpec(disparity_range=(1.0, 12.0), sparsity=0.2, d_max=32)
    path = write_synthetic_dataset(root, 6, (32, 48), spec, seed=3)
    return load_manifest(path)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
