"""Shared fixtures: one small trained model reused across test modules."""

from dataclasses import dataclass

import numpy as np
import pytest

from medadv.classifier import TrainConfig, build_model, reference_recipe, train
from medadv.data import SynthConfig, generate_synthetic, split_dataset


@dataclass
class Desk:
    model: object
    train: object
    adv_train: object
    adv_test: object


@pytest.fixture(scope="session")
def desk():
    data = generate_synthetic(SynthConfig(seed=5), 800)
    tr, a, b = split_dataset(data, (0.6, 0.3, 0.1), seed=0)
    model = build_model(reference_recipe(2, seed=5))
    model = train(model, tr.images, tr.labels, TrainConfig(epochs=10, learning_rate=0.02, batch_size=16, seed=5))
    return Desk(model, tr, a, b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
