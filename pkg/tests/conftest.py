"""Shared fixtures: a tiny experiment that runs every stage in seconds."""

import pytest

from latentprog.config import load_config

TINY_TOML = """\
seed = 0

[data]
train_size = 8
val_size = 2
test_size = 2
supervision_fraction = 0.25

[model]
embed_dim = 4
hidden_dim = 8
channels = 4

[prior]
steps = 5
batch_size = 4

[question_coding]
epochs = 1
batch_size = 4

[module_training]
epochs = 1
batch_size = 4

[joint_training]
epochs = 1
batch_size = 4

[probe]
n_draws = 50
top_k = 3
"""


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


@pytest.fixture
def tiny_config(tiny_config_path):
    return load_config(tiny_config_path)
