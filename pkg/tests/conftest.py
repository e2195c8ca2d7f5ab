"""Shared fixtures for the vtprune tests."""

import pytest

from vtprune.utils.config import RunConfig

# Small enough that a training step takes milliseconds
SMALL = dict(
    visual_tokens=8,
    language_tokens=3,
    dim=8,
    informative_tokens=2,
    vocab_size=6,
    action_dim=2,
    n_queries=4,
    decoder_layers=2,
    prune_layer=1,
    batch_size=2,
    steps=2,
    eval_episodes=4,
    log_every=1,
)


@pytest.fixture
def small_cfg():
    """A tiny parameter-free configuration."""
    return RunConfig(**SMALL)


@pytest.fixture
def small_config_file(tmp_path):
    """The tiny configuration written as a key = value file."""
    path = tmp_path / "small.conf"
    path.write_text(RunConfig(**SMALL).to_text())
    return path
