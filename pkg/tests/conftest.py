"""Shared fixtures: a small synthetic dataset and trained models.

Unit tests run on a scaled-down dataset so the whole suite stays fast; the
acceptance tests build the full-size default dataset themselves.
"""

import numpy as np
import pytest

from mint.classifier import ModelConfig, train
from mint.engine import train_image_value_model
from mint.synthdata import GeneratorConfig, generate

SMALL_GEN = GeneratorConfig(train_cases=600, val_cases=200, test_cases=200, seed=1)
SMALL_MODEL = ModelConfig(steps=1200, seed=0)


@pytest.fixture(scope="session")
def small_data():
    return generate(SMALL_GEN)


@pytest.fixture(scope="session")
def schema(small_data):
    return small_data[3]


@pytest.fixture(scope="session")
def film_model(small_data):
    train_cases, val, _, schema = small_data
    return train(train_cases, schema, SMALL_MODEL, validation=val)


@pytest.fixture(scope="session")
def concat_model(small_data):
    train_cases, val, _, schema = small_data
    cfg = ModelConfig(steps=1200, seed=0, fusion="concat")
    return train(train_cases, schema, cfg, validation=val)


@pytest.fixture(scope="session")
def image_value_model(small_data, film_model):
    _, val, _, schema = small_data
    return train_image_value_model(val, film_model, schema, seed=7)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
