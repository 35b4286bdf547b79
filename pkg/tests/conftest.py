"""Shared fixtures; the suite runs with the testing configuration."""
import os

os.environ.setdefault('MFDELAY_ENV', 'testing')
os.environ.setdefault('MFDELAY_LOG', 'error')

import numpy as np
import pytest

from mfdelay.models.paths import make_grid
from mfdelay.services.recursive_utility import ConsumptionModel


@pytest.fixture
def grid():
    return make_grid(1.0, 0.01)


@pytest.fixture
def delayed_grid():
    return make_grid(1.0, 0.1, 0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def consumption():
    return ConsumptionModel(x=1.0, c=0.05, alpha=0.4, beta=0.1, T=2.0)


@pytest.fixture
def consumption_grid():
    return make_grid(2.0, 0.01)
