import numpy as np
import pytest

from qrcoverage.core import Dataset


def gaussian_data(n, d, seed=0, sigma=1.0):
    """Gaussian design with ``beta ~ N(0, I/d)`` and Gaussian noise."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    beta = rng.standard_normal(d) / np.sqrt(max(d, 1))
    return Dataset(X, X @ beta + sigma * rng.standard_normal(n))


@pytest.fixture
def make_data():
    return gaussian_data
