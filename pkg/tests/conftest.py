import numpy as np
import pytest


def orders(errors):
    """Observed convergence orders between successive mesh halvings."""
    e = np.asarray(errors, dtype=float)
    return np.log2(e[:-1] / e[1:])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
