"""Limited-memory symmetric-rank-1 (SR1) Hessian approximations.

The approximation is kept in compact form

    B = gamma * I + Psi M^{-1} Psi^T,   Psi = Y - gamma * S,
    M = D + L + L^T - gamma * S^T S,

where S and Y stack the stored curvature pairs column-wise and D/L are the
diagonal and strictly-lower parts of S^T Y.  Nothing of size n x n is ever
formed; all small factors have the history size (<= ~10).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np

from .linalg import sym_eigen

__all__ = ["Lsr1Error", "Lsr1Memory", "SKIP_RTOL"]

# Standard SR1 safeguard: skip the update when |s^T (y - Bs)| is tiny
# relative to ||s|| * ||y - Bs||.
SKIP_RTOL = 1e-8

GAMMA_MIN = 1e-6
GAMMA_MAX = 1e6

# A pair set is unusable when M has an eigenvalue this small relative to
# its largest one.
_M_SINGULAR_RTOL = 1e-12


class Lsr1Error(ValueError):
    """Invalid input to an LSR1 memory operation."""


def _compact_factors(
    gamma: float, pairs: Sequence[Tuple[np.ndarray, np.ndarray]]
) -> Tuple[np.ndarray, np.ndarray]:
    s_mat = np.column_stack([s for s, _ in pairs])
    y_mat = np.column_stack([y for _, y in pairs])
    psi = y_mat - gamma * s_mat
    sy = s_mat.T @ y_mat
    lower = np.tril(sy, -1)
    m_mat = np.diag(np.diag(sy)) + lower + lower.T - gamma * (s_mat.T @ s_mat)
    return psi, m_mat


def _m_is_singular(m_mat: np.ndarray) -> bool:
    w, _ = sym_eigen(m_mat)
    aw = np.abs(w)
    return bool(aw.min() <= _M_SINGULAR_RTOL * max(1.0, aw.max()))


@dataclass(frozen=True)
class Lsr1Memory:
    """Bounded ring of (s, y) curvature pairs plus the base scale gamma.

    Instances are value-like: :meth:`update` and :meth:`restrict` return new
    memories and never mutate the receiver, so snapshots can be shared
    freely across concurrent local solvers.
    """

    capacity: int
    gamma: float = 1.0
    pairs: Tuple[Tuple[np.ndarray, np.ndarray], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.capacity < 0:
            raise Lsr1Error("capacity must be >= 0")
        if not np.isfinite(self.gamma) or self.gamma <= 0.0:
            raise Lsr1Error(f"gamma must be positive and finite, got {self.gamma}")
        if len(self.pairs) > self.capacity:
            raise Lsr1Error("more pairs than capacity")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def dim(self) -> Optional[int]:
        """Vector dimension, or None while no pair has been stored."""
        return self.pairs[0][0].shape[0] if self.pairs else None

    @cached_property
    def _live(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        # Factors actually used by matvec/compact.  When M is (near-)singular
        # the memory degrades by dropping pairs oldest-first and retrying.
        pairs = list(self.pairs)
        while pairs:
            psi, m_mat = _compact_factors(self.gamma, pairs)
            if not _m_is_singular(m_mat):
                return psi, m_mat
            pairs.pop(0)
        return None

    def compact(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Usable (Psi, M) factors, or None when B degenerates to gamma*I."""
        return self._live

    def matvec(self, v) -> np.ndarray:
        """Apply the approximation: B v, without forming B."""
        v = np.asarray(v, dtype=float)
        if self.dim is not None and v.shape != (self.dim,):
            raise Lsr1Error(f"dimension mismatch: v has shape {v.shape}, pairs have dim {self.dim}")
        live = self._live
        if live is None:
            return self.gamma * v
        psi, m_mat = live
        return self.gamma * v + psi @ np.linalg.solve(m_mat, psi.T @ v)

    def update(self, s, y) -> "Lsr1Memory":
        """Insert a curvature pair, subject to the SR1 skip rule.

        The pair is stored only when |s^T (y - Bs)| >= r ||s|| ||y - Bs||
        with r = 1e-8; otherwise the memory is returned unchanged.  On an
        accepted pair gamma is refreshed to y^T y / s^T y (clamped, and only
        when that keeps the compact factors invertible).
        """
        s = np.array(s, dtype=float)
        y = np.array(y, dtype=float)
        if s.ndim != 1 or s.shape != y.shape:
            raise Lsr1Error(f"s and y must be 1-D of equal length, got {s.shape} and {y.shape}")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y))):
            raise Lsr1Error("non-finite curvature pair")
        if not np.any(s):
            raise Lsr1Error("s must be nonzero")
        if self.dim is not None and s.shape[0] != self.dim:
            raise Lsr1Error(f"dimension mismatch: pair has dim {s.shape[0]}, memory has {self.dim}")
        if self.capacity == 0:
            return self
        return self._insert(s, y, refresh_gamma=True)

    def _insert(self, s: np.ndarray, y: np.ndarray, refresh_gamma: bool) -> "Lsr1Memory":
        w = y - self.matvec(s)
        w_norm = float(np.linalg.norm(w))
        s_norm = float(np.linalg.norm(s))
        if w_norm == 0.0 or abs(float(s @ w)) < SKIP_RTOL * s_norm * w_norm:
            return self
        pairs = self.pairs + ((s, y),)
        if len(pairs) > self.capacity:
            pairs = pairs[1:]
        gamma = self.gamma
        sy = float(s @ y)
        if refresh_gamma and sy > 0.0:
            candidate = float(np.clip((y @ y) / sy, GAMMA_MIN, GAMMA_MAX))
            if candidate != gamma:
                _, m_cand = _compact_factors(candidate, pairs)
                if not _m_is_singular(m_cand):
                    gamma = candidate
        return Lsr1Memory(self.capacity, gamma, pairs)

    def restrict(self, coords) -> "Lsr1Memory":
        """Memory over the sub-vector space picked out by ``coords``.

        Stored pairs are cut down to the given coordinates and re-validated
        through the skip rule in insertion order; pairs losing their support
        (restricted s = 0) or failing the rule are dropped.  gamma carries
        over unchanged.
        """
        coords = np.asarray(coords, dtype=np.intp)
        if coords.ndim != 1 or coords.size == 0:
            raise Lsr1Error("coords must be a non-empty 1-D index set")
        if np.unique(coords).size != coords.size:
            raise Lsr1Error("coords must not repeat indices")
        if self.dim is not None and (coords.min() < 0 or coords.max() >= self.dim):
            raise Lsr1Error("coords out of range")
        out = Lsr1Memory(self.capacity, self.gamma)
        for s, y in self.pairs:
            s_r = s[coords]
            if not np.any(s_r):
                continue
            out = out._insert(s_r, y[coords], refresh_gamma=False)
        return out
