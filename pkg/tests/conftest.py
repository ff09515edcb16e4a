import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_symmetric(rng, n, scale=1.0):
    a = rng.standard_normal((n, n)) * scale
    return 0.5 * (a + a.T)


def dense_sr1(gamma, pairs, n):
    """Sequential SR1 recursion; reference for the compact form."""
    b = gamma * np.eye(n)
    for s, y in pairs:
        w = y - b @ s
        den = float(w @ s)
        b = b + np.outer(w, w) / den
    return b
