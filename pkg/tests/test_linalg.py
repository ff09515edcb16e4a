import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apts.linalg import (
    AsymmetricMatrixError,
    IndefiniteMatrixError,
    LinalgError,
    RootFindError,
    cholesky,
    newton_root,
    sym_eigen,
)

from conftest import random_symmetric


class TestSymEigen:
    def test_identity(self):
        w, q = sym_eigen(np.eye(3))
        assert np.allclose(w, [1.0, 1.0, 1.0])
        assert np.abs(q.T @ q - np.eye(3)).max() <= 1e-10

    def test_diagonal_sorted_ascending(self):
        w, _ = sym_eigen(np.diag([3.0, 1.0, 2.0]))
        assert np.allclose(w, [1.0, 2.0, 3.0])

    def test_random_8x8_reconstruction(self, rng):
        a = random_symmetric(rng, 8)
        w, q = sym_eigen(a)
        err = np.abs(q @ np.diag(w) @ q.T - a).max()
        assert err <= 1e-9 * (1.0 + np.abs(a).max())

    def test_rejects_asymmetric(self):
        a = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(AsymmetricMatrixError):
            sym_eigen(a)

    def test_rejects_nonfinite(self):
        with pytest.raises(LinalgError):
            sym_eigen(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_rejects_oversized(self):
        with pytest.raises(LinalgError):
            sym_eigen(np.eye(65))

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 16), seed=st.integers(0, 10_000))
    def test_reconstruction_property(self, n, seed):
        a = random_symmetric(np.random.default_rng(seed), n, scale=3.0)
        w, q = sym_eigen(a)
        assert np.all(np.diff(w) >= 0.0)
        assert np.abs(q.T @ q - np.eye(n)).max() <= 1e-10
        assert np.abs(q @ np.diag(w) @ q.T - a).max() <= 1e-9 * (1.0 + np.abs(a).max())


class TestCholesky:
    def test_diagonal(self):
        low = cholesky(np.diag([4.0, 9.0]))
        assert np.allclose(low, np.diag([2.0, 3.0]))

    def test_hand_expanded(self):
        # [[2,0],[1,2]] @ [[2,1],[0,2]] == [[4,2],[2,5]]
        low = cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]))
        assert np.allclose(low, [[2.0, 0.0], [1.0, 2.0]])

    def test_indefinite_raises(self):
        with pytest.raises(IndefiniteMatrixError):
            cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))  # eigenvalue -1

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 16), seed=st.integers(0, 10_000))
    def test_reconstruction_property(self, n, seed):
        rng = np.random.default_rng(seed)
        root = rng.standard_normal((n, n))
        a = root @ root.T + n * np.eye(n)
        low = cholesky(a)
        assert np.abs(np.triu(low, 1)).max() == 0.0
        err = np.abs(low @ low.T - a).max()
        assert err <= 1e-9 * (1.0 + np.abs(a).max())


class TestNewtonRoot:
    def test_known_quadratic_root(self):
        root = newton_root(lambda x: (x * x - 4.0, 2.0 * x), 3.0, 1e-12)
        assert abs(root - 2.0) <= 1e-12

    def test_linear(self):
        root = newton_root(lambda x: (x, 1.0), 5.0, 1e-14)
        assert abs(root) <= 1e-14

    def test_bracket_containment(self, rng):
        # Newton from a bad start would overshoot; the bracket must hold it.
        def f(x):
            return (np.tanh(x) - 0.5, 1.0 / np.cosh(x) ** 2)

        root = newton_root(f, 10.0, 1e-12, bracket=(0.0, 10.0))
        assert 0.0 <= root <= 10.0
        assert abs(np.tanh(root) - 0.5) <= 1e-12

    def test_stagnation_raises(self):
        # f has no root and no sign change on the bracket.
        with pytest.raises(RootFindError):
            newton_root(lambda x: (1.0 + x * x, 2.0 * x), 1.0, 1e-12, bracket=(0.5, 2.0))

    @settings(max_examples=40, deadline=None)
    @given(
        target=st.floats(-0.9, 0.9),
        start=st.floats(-5.0, 5.0),
    )
    def test_bracketed_roots_property(self, target, start):
        def f(x):
            return (np.tanh(x) - target, 1.0 / np.cosh(x) ** 2)

        root = newton_root(f, start, 1e-11, bracket=(-6.0, 6.0))
        assert -6.0 <= root <= 6.0
        assert abs(np.tanh(root) - target) <= 1e-11
