import numpy as np
import pytest

from tdistill import tensor as T


@pytest.fixture
def f64():
    """Run a test in float64 mode (required for finite-difference checks)."""
    with T.precision("float64"):
        yield


@pytest.fixture(autouse=True)
def _fresh_graph():
    with T.scoped_graph():
        yield


def rng(seed=0):
    return np.random.default_rng(seed)
