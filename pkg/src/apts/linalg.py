"""Small dense linear-algebra kernels for quasi-Newton compact factors.

Everything here targets tiny symmetric systems (quasi-Newton history blocks,
dimension <= 64), so robust O(n^3) textbook algorithms are preferred over
library calls: cyclic Jacobi for eigenvalues, unblocked Cholesky, and a
safeguarded scalar Newton iteration for secular equations.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Tuple

import numpy as np

__all__ = [
    "LinalgError",
    "AsymmetricMatrixError",
    "IndefiniteMatrixError",
    "RootFindError",
    "MAX_DIM",
    "sym_eigen",
    "cholesky",
    "newton_root",
]

MAX_DIM = 64

# Asymmetry is measured relative to the magnitude of the matrix; anything
# above this is treated as a caller bug, not roundoff.
ASYMMETRY_TOL = 1e-10


class LinalgError(ValueError):
    """Base error for the dense kernels."""


class AsymmetricMatrixError(LinalgError):
    """Symmetric-only operation applied to a non-symmetric matrix."""


class IndefiniteMatrixError(LinalgError):
    """Cholesky hit a non-positive pivot; matrix is not positive definite."""


class RootFindError(LinalgError):
    """Newton iteration stagnated without a usable sign change."""


def _as_symmetric(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinalgError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > MAX_DIM:
        raise LinalgError(f"dimension {n} exceeds supported maximum {MAX_DIM}")
    if not np.all(np.isfinite(a)):
        raise LinalgError("matrix has non-finite entries")
    if n:
        asym = float(np.max(np.abs(a - a.T)))
        scale = max(1.0, float(np.max(np.abs(a))))
        if asym > ASYMMETRY_TOL * scale:
            raise AsymmetricMatrixError(
                f"matrix is not symmetric (max |A - A^T| = {asym:.3e})"
            )
    return a


def sym_eigen(a) -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a small symmetric matrix via cyclic Jacobi.

    Returns ``(w, q)`` with eigenvalues ``w`` sorted ascending and the
    corresponding orthonormal eigenvectors in the columns of ``q``, so that
    ``a = q @ diag(w) @ q.T`` up to roundoff.
    """
    a = _as_symmetric(a)
    n = a.shape[0]
    if n == 0:
        return np.empty(0), np.empty((0, 0))
    d = 0.5 * (a + a.T)  # symmetrize away the tolerated asymmetry
    q = np.eye(n)
    scale = max(1.0, float(np.max(np.abs(d))))
    # Quadratic convergence: a handful of sweeps suffices at these sizes.
    for _ in range(60):
        off = math.sqrt(float(np.sum(np.tril(d, -1) ** 2)))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = d[p, r]
                if abs(apr) <= 1e-18 * scale:
                    continue
                theta = (d[r, r] - d[p, p]) / (2.0 * apr)
                t = math.copysign(1.0, theta) / (
                    abs(theta) + math.sqrt(theta * theta + 1.0)
                )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.array([[c, -s], [s, c]])
                d[[p, r], :] = rot @ d[[p, r], :]
                d[:, [p, r]] = d[:, [p, r]] @ rot.T
                q[:, [p, r]] = q[:, [p, r]] @ rot.T
                d[p, r] = d[r, p] = 0.0
    w = np.diag(d).copy()
    order = np.argsort(w, kind="stable")
    return w[order], q[:, order]


def cholesky(a) -> np.ndarray:
    """Lower-triangular Cholesky factor of a small SPD matrix.

    Raises :class:`IndefiniteMatrixError` on a non-positive pivot, which
    callers use as the signal to switch to an eigendecomposition-based path.
    """
    a = _as_symmetric(a)
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - float(low[j, :j] @ low[j, :j])
        if pivot <= 0.0:
            raise IndefiniteMatrixError(
                f"non-positive pivot {pivot:.3e} at column {j}"
            )
        low[j, j] = math.sqrt(pivot)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[
                j, j
            ]
    return low


def newton_root(
    f: Callable[[float], Tuple[float, float]],
    x0: float,
    tol: float,
    bracket: Optional[Tuple[float, float]] = None,
    max_iter: int = 100,
) -> float:
    """Safeguarded Newton iteration for a scalar root.

    ``f(x)`` must return ``(value, derivative)``. When ``bracket=(lo, hi)``
    is supplied the iterate never leaves it: Newton steps falling outside are
    replaced by bisection, and the interval shrinks around the sign change.
    Without a sign change in the bracket, plain Newton runs and stagnation
    after ``max_iter`` iterations raises :class:`RootFindError`.
    """
    if tol <= 0.0:
        raise LinalgError("tol must be positive")
    lo = hi = None
    flo = fhi = None
    x = float(x0)
    if bracket is not None:
        lo, hi = float(bracket[0]), float(bracket[1])
        if lo > hi:
            lo, hi = hi, lo
        flo = f(lo)[0]
        fhi = f(hi)[0]
        if abs(flo) <= tol:
            return lo
        if abs(fhi) <= tol:
            return hi
        x = min(max(x, lo), hi)
    bisectable = (
        lo is not None and np.isfinite(flo) and np.isfinite(fhi) and flo * fhi < 0.0
    )

    for _ in range(max_iter):
        fx, dfx = f(x)
        if abs(fx) <= tol:
            return x
        if bisectable:
            if fx * flo < 0.0:
                hi, fhi = x, fx
            else:
                lo, flo = x, fx
        step_ok = np.isfinite(dfx) and dfx != 0.0
        x_new = x - fx / dfx if step_ok else math.nan
        if lo is not None:
            if not np.isfinite(x_new) or x_new <= lo or x_new >= hi:
                if not bisectable:
                    raise RootFindError(
                        "Newton left the bracket and no sign change is available"
                    )
                x_new = 0.5 * (lo + hi)
        elif not np.isfinite(x_new):
            raise RootFindError("Newton produced a non-finite iterate")
        if x_new == x:
            # No progress possible at this precision; accept if close enough.
            if abs(fx) <= tol:
                return x
            raise RootFindError("Newton stagnated before reaching tolerance")
        x = x_new

    fx, _ = f(x)
    if abs(fx) <= tol:
        return x
    raise RootFindError(f"no root found in {max_iter} iterations (|f| = {abs(fx):.3e})")
