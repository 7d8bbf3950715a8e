"""Shared small-scale fixtures for the unit tests.

The tiny configuration (8x8 images, 4 tokens) keeps training-path tests in
the sub-second range; the acceptance suite builds its own default-size runs.
"""
import numpy as np
import pytest

from deltadapter.adapter import AdapterConfig
from deltadapter.flownet import BackboneConfig
from deltadapter.model import ModelConfig
from deltadapter.synth import DataConfig, gen_dataset
from deltadapter.toyvision import EncoderConfig
from deltadapter.trainer import TrainConfig, pretrain_backbone, train_adapter


def tiny_model_config(**adapter_kw) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(height=8, width=8, patch=4, dim=8, heads=2, seed=0),
        backbone=BackboneConfig(tokens=4, latent_dim=48, width=16, heads=2, blocks=2, cond_dim=8,
                                time_dim=8, patch=4, seed=2),
        adapter=AdapterConfig(feature_dim=8, num_queries=3, cond_dim=8, heads=2, seed=1, **adapter_kw),
    )


TINY_DATA = DataConfig(height=8, width=8, train_episodes=24, eval_episodes=12, seed=3)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def tiny_data():
    return gen_dataset(TINY_DATA)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


PRE = TrainConfig(stage="pretrain", steps=30, batch_size=4, seed=0)
ADA = TrainConfig(steps=20, batch_size=4, seed=0)


@pytest.fixture(scope="session")
def base(tiny_cfg, tiny_data):
    """Briefly pretrained tiny backbone."""
    return pretrain_backbone(PRE, tiny_data, tiny_cfg)


@pytest.fixture(scope="session")
def adapted(base, tiny_data):
    return train_adapter(ADA, base, tiny_data)


# the tiny configuration as a CLI config file
TINY_INI = """
[data]
height = 8
width = 8
train_episodes = 24
eval_episodes = 12
seed = 3

[model]
encoder.height = 8
encoder.width = 8
encoder.patch = 4
encoder.dim = 8
encoder.heads = 2
backbone.tokens = 4
backbone.latent_dim = 48
backbone.width = 16
backbone.heads = 2
backbone.blocks = 2
backbone.cond_dim = 8
backbone.time_dim = 8
backbone.patch = 4
adapter.feature_dim = 8
adapter.num_queries = 3
adapter.cond_dim = 8
adapter.heads = 2

[pretrain]
steps = 10
batch_size = 4

[train]
steps = 6
batch_size = 4

[eval]
limit = 4

[tta]
steps = 2
noise_draws = 2
"""


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
