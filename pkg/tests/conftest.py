"""Shared fixtures: a very small network and schedule so training tests run in seconds."""

from __future__ import annotations

import pytest

from aptdiff.checkpoint import save_checkpoint
from aptdiff.config import AptConfig, DiffusionConfig, PretrainConfig
from aptdiff.corpus import make_corpus, make_reference_set
from aptdiff.tinynet import NetConfig
from aptdiff.trainer import pretrain

TINY_NET = NetConfig(
    image_size=16,
    in_channels=3,
    base_channels=8,
    channel_multipliers=(1, 2),
    attention_levels=(0, 1),
    num_heads=2,
    token_dim=8,
    max_tokens=12,
    tap_levels=(0, 1),
)

TINY_DIFFUSION = DiffusionConfig(num_timesteps=20, beta_start=1e-3, beta_end=0.2)

TINY_PRETRAIN = PretrainConfig(
    steps=5, corpus_size=16, batch_size=4, val_size=8, log_every=5, seed=0
)


def tiny_apt(**changes) -> AptConfig:
    settings = {
        "adapter_rank": 2,
        "steps": 4,
        "checkpoint_every": 2,
        "num_probes": 6,
        "lr_adapter": 1e-2,
        "lr_token": 1e-2,
    }
    settings.update(changes)
    return AptConfig(**settings)


@pytest.fixture
def net_config():
    return TINY_NET


@pytest.fixture(scope="session")
def tiny_corpus():
    return make_corpus(TINY_PRETRAIN.corpus_size, TINY_NET.image_size, seed=0)


@pytest.fixture(scope="session")
def prior(tiny_corpus):
    """A barely trained prior; only the plumbing matters for most tests."""
    return pretrain(
        tiny_corpus,
        TINY_NET,
        TINY_PRETRAIN.steps,
        TINY_PRETRAIN.seed,
        settings=TINY_PRETRAIN,
        diffusion=TINY_DIFFUSION,
    )


@pytest.fixture(scope="session")
def prior_path(prior, tmp_path_factory):
    return save_checkpoint(prior, tmp_path_factory.mktemp("prior") / "prior.pt")


@pytest.fixture
def references():
    return make_reference_set(1, TINY_NET.image_size)
