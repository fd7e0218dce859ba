"""Shared fixtures: toy worlds, oracles, and session-scoped trained models."""

import numpy as np
import pytest

from maskfuse.config import RunConfig
from maskfuse.data import ToyWorldConfig, generate_toy_dataset
from maskfuse.denoiser import OracleDenoiser, ToyJointDistribution
from maskfuse.train import train_model
from maskfuse.transformer import ModelSpec
from maskfuse.vocab import JointVocab, ModalityLayout


@pytest.fixture(scope="session")
def toy_2x2():
    """2x2 grid, 2 colors: 16 uniform pairs, L=8."""
    return generate_toy_dataset(ToyWorldConfig(rows=2, cols=2, palette_size=2))


@pytest.fixture(scope="session")
def oracle_2x2(toy_2x2):
    return OracleDenoiser(toy_2x2.dist)


@pytest.fixture(scope="session")
def minimal_pair_dist():
    """Two positions (one image cell, one text token), support {AB, BA}-style."""
    vocab = JointVocab(text_size=2, image_size=2)
    layout = ModalityLayout(1, 1, 1)
    support = np.array([[2, 0], [3, 1]])  # image ids 2,3; text ids 0,1
    probs = np.array([0.5, 0.5])
    return ToyJointDistribution(support, probs, layout, vocab)


def small_spec(vocab, layout, **overrides) -> ModelSpec:
    base = dict(
        n_layers=2,
        n_heads=2,
        d_model=32,
        text_size=vocab.text_size,
        image_size=vocab.image_size,
        image_rows=layout.image_rows,
        image_cols=layout.image_cols,
        text_len=layout.text_len,
        image_first=layout.image_first,
        zero_init_output=False,
    )
    base.update(overrides)
    return ModelSpec(**base)


def train_config(**overrides) -> RunConfig:
    cfg = RunConfig.defaults()
    cfg.values.update(
        {
            "model.n_layers": 2,
            "model.n_heads": 4,
            "model.d_model": 64,
            "train.steps": 3000,
            "train.batch_size": 128,
            "train.lr": 1e-3,
            "train.warmup_steps": 100,
            "seed": 0,
        }
    )
    cfg.values.update(overrides)
    return cfg


@pytest.fixture(scope="session")
def trained_diffusion(toy_2x2):
    """Tiny diffusion model fit to the 2x2 toy (acceptance criteria 9/10)."""
    import time

    cfg = train_config()
    t0 = time.perf_counter()
    result = train_model(cfg, toy_2x2)
    return cfg, result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained_ar(toy_2x2):
    """Causal baseline fit to the same toy."""
    import time

    cfg = train_config(**{"model.attention": "causal", "train.steps": 1500})
    t0 = time.perf_counter()
    result = train_model(cfg, toy_2x2)
    return cfg, result, time.perf_counter() - t0
