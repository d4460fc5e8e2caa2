import numpy as np
import pytest

from layerfuse.synthgen import SynthSpec, generate_planted, generate_separable


@pytest.fixture(scope="session")
def tiny_separable_store():
    """Small separable store with patch tokens: 2 classes, 2 layers, d=8, P=4."""
    spec = SynthSpec(
        split_sizes={"train": 100, "val": 40, "test": 40},
        num_layers=2,
        hidden_dims=8,
        num_patches=4,
        num_classes=2,
        seed=11,
    )
    return generate_separable(spec)


@pytest.fixture(scope="session")
def tiny_planted_store():
    """Planted store: signal only at (layer 2, AP) of a 3-layer, d=8 stack."""
    spec = SynthSpec(
        split_sizes={"train": 150, "val": 50, "test": 50},
        num_layers=3,
        hidden_dims=8,
        num_classes=2,
        planted_layer=2,
        planted_kind="AP",
        seed=5,
    )
    return generate_planted(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
