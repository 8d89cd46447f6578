import numpy as np
import pytest
import torch

from posebert.mocapgen import GeneratorConfig, generate_dataset
from posebert.model import PoseBertConfig, init_model
from posebert.skeleton import default_skeleton


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(GeneratorConfig(n_sequences=12, frames_per_sequence=40, seed=5))


@pytest.fixture
def tiny_model():
    cfg = PoseBertConfig(num_layers=2, embed_dim=32, num_heads=2, seq_len=8, regressor_hidden=32)
    return init_model(cfg, seed=3, dtype=torch.float64)


def randomize(model, seed=0, scale=0.1):
    """Give every parameter (including the zero-initialised output layer) random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in model.params.items():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * scale)
    return model
