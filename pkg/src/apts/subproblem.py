"""Trust-region subproblem solvers.

Three routes are provided:

* :func:`solve_first_order` -- the linear-model step, a negative gradient
  scaled to infinity-norm length ``delta``;
* :func:`solve_obs` -- exact 2-norm minimizer of the quadratic model for a
  compact limited-memory SR1 approximation, working in the small basis
  spanned by the stored updates (interior, boundary and hard cases);
* :func:`solve_trs_dense` -- a dense reference solver used to cross-check
  ``solve_obs``; it goes through a full eigendecomposition and an
  independent 1-D root find, deliberately sharing no code with the
  compact-form path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .linalg import (
    IndefiniteMatrixError,
    LinalgError,
    RootFindError,
    cholesky,
    newton_root,
    sym_eigen,
)
from .lsr1 import Lsr1Memory

__all__ = [
    "SubproblemError",
    "SubproblemSolution",
    "solve_first_order",
    "solve_obs",
    "solve_trs_dense",
]

log = logging.getLogger(__name__)

# Eigenvalues within this relative band of the smallest one count as part of
# the leftmost eigenspace when deciding the hard case.
_EIG_CLUSTER_RTOL = 1e-12


class SubproblemError(ValueError):
    """Invalid input to a subproblem solver."""


@dataclass(frozen=True)
class SubproblemSolution:
    """Result of one trust-region subproblem solve.

    ``predicted_reduction`` is ``m(0) - m(step) >= 0``; ``sigma`` is the
    Lagrange multiplier of the norm constraint (second-order solvers only).
    ``converged`` marks the degenerate zero-gradient case.
    """

    step: np.ndarray
    predicted_reduction: float
    boundary_hit: bool
    sigma: float = 0.0
    converged: bool = False
    fallback_first_order: bool = False


def _check_grad(grad) -> np.ndarray:
    g = np.asarray(grad, dtype=float)
    if g.ndim != 1:
        raise SubproblemError(f"gradient must be 1-D, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise SubproblemError("gradient has non-finite entries")
    return g


def solve_first_order(grad, delta: float) -> SubproblemSolution:
    """Linear-model trust-region step: -delta * g / ||g||_inf.

    The step has infinity-norm exactly ``delta`` unless the gradient is
    zero, in which case a converged zero step is returned.
    """
    if delta <= 0.0:
        raise SubproblemError(f"delta must be positive, got {delta}")
    g = _check_grad(grad)
    g_inf = float(np.max(np.abs(g))) if g.size else 0.0
    if g_inf == 0.0:
        return SubproblemSolution(np.zeros_like(g), 0.0, False, converged=True)
    step = (-delta / g_inf) * g
    predicted = float(-g @ step)
    return SubproblemSolution(step, predicted, True)


def _first_nonzero_sign_flip(z: np.ndarray) -> np.ndarray:
    # Deterministic orientation: first nonzero component made negative.
    nz = np.nonzero(z)[0]
    if nz.size and z[nz[0]] > 0.0:
        return -z
    return z


def _boundary_extension(s: np.ndarray, z: np.ndarray, delta: float) -> np.ndarray:
    # alpha >= 0 with ||s + alpha z|| = delta, ||z|| = 1.
    sz = float(s @ z)
    rad = sz * sz + delta * delta - float(s @ s)
    alpha = -sz + math.sqrt(max(rad, 0.0))
    return s + alpha * z


def solve_obs(mem: Lsr1Memory, grad, delta: float) -> SubproblemSolution:
    """Exact 2-norm trust-region solve for a compact SR1 model.

    Works in the orthonormal basis of the low-rank correction, so all dense
    algebra stays at the history size.  On factorization breakdown the solver
    logs the failure and degrades to the first-order step at the same radius.
    """
    if delta <= 0.0:
        raise SubproblemError(f"delta must be positive, got {delta}")
    g = _check_grad(grad)
    if mem.dim is not None and g.shape[0] != mem.dim:
        raise SubproblemError(
            f"gradient dim {g.shape[0]} does not match memory dim {mem.dim}"
        )
    try:
        return _solve_obs_inner(mem, g, delta)
    except (LinalgError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("OBS factorization breakdown (%s); using first-order step", exc)
        sol = solve_first_order(g, delta)
        return SubproblemSolution(
            sol.step,
            sol.predicted_reduction,
            sol.boundary_hit,
            converged=sol.converged,
            fallback_first_order=True,
        )


def _solve_obs_inner(mem: Lsr1Memory, g: np.ndarray, delta: float) -> SubproblemSolution:
    n = g.shape[0]
    gamma = mem.gamma
    live = mem.compact()

    if live is None:
        # B = gamma * I with gamma > 0: scaled steepest descent.
        g2 = float(np.linalg.norm(g))
        if g2 == 0.0:
            return SubproblemSolution(np.zeros_like(g), 0.0, False, converged=True)
        newton = -g / gamma
        if np.linalg.norm(newton) <= delta:
            predicted = 0.5 * g2 * g2 / gamma
            return SubproblemSolution(newton, float(predicted), False)
        step = (-delta / g2) * g
        sigma = g2 / delta - gamma
        predicted = delta * g2 - 0.5 * gamma * delta * delta
        return SubproblemSolution(step, float(predicted), True, sigma=float(sigma))

    psi, m_small = live
    k = psi.shape[1]

    # Orthonormal basis for range(Psi).  Cholesky of Psi^T Psi is the cheap
    # route; rank deficiency drops us to the eigendecomposition path.
    ptp = psi.T @ psi
    ptp = 0.5 * (ptp + ptp.T)
    try:
        low = cholesky(ptp)
        r_factor = low.T  # Psi = Q R with R upper triangular
        q_basis = np.linalg.solve(low, psi.T).T
    except IndefiniteMatrixError:
        w_p, v_p = sym_eigen(ptp)
        keep = w_p > 1e-12 * max(1.0, float(w_p.max(initial=0.0)))
        if not np.any(keep):
            shrunk = Lsr1Memory(mem.capacity, gamma)
            return _solve_obs_inner(shrunk, g, delta)
        roots = np.sqrt(w_p[keep])
        q_basis = psi @ (v_p[:, keep] / roots)
        r_factor = (v_p[:, keep] * roots).T

    c_small = r_factor @ np.linalg.solve(m_small, r_factor.T)
    c_small = 0.5 * (c_small + c_small.T)
    lam_hat, v_hat = sym_eigen(c_small)

    p_par = q_basis @ v_hat  # n x r, orthonormal columns
    lam_par = gamma + lam_hat  # ascending
    a_par = p_par.T @ g
    g_perp = g - p_par @ a_par
    a_perp = float(np.linalg.norm(g_perp))
    r = p_par.shape[1]
    has_complement = r < n

    lam_all = np.concatenate([lam_par, [gamma]]) if has_complement else lam_par
    a_all = np.concatenate([a_par, [a_perp]]) if has_complement else a_par
    lam_min = float(lam_all.min())
    gap_tol = _EIG_CLUSTER_RTOL * max(1.0, float(np.max(np.abs(lam_all))))

    if not np.any(a_all):
        # Zero gradient: stay put unless the model is concave somewhere.
        if lam_min >= 0.0:
            return SubproblemSolution(np.zeros_like(g), 0.0, False, converged=True)
        z = _first_nonzero_sign_flip(p_par[:, 0].copy())
        step = delta * z
        predicted = -0.5 * lam_min * delta * delta
        return SubproblemSolution(step, float(predicted), True, sigma=float(-lam_min))

    def shifted_norm_sq(sigma: float) -> float:
        den = lam_all + sigma
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            terms = (a_all / den) ** 2
        terms = np.where((den == 0.0) & (a_all == 0.0), 0.0, terms)
        return float(np.sum(terms))

    def build_step(sigma: float, drop_critical: bool = False) -> np.ndarray:
        den = lam_par + sigma
        with np.errstate(divide="ignore", invalid="ignore"):
            coeff = np.where(den != 0.0, -a_par / den, 0.0)
        if drop_critical:
            coeff = np.where(np.abs(den) <= gap_tol, 0.0, coeff)
        step = p_par @ coeff
        if has_complement:
            step = step - g_perp / (gamma + sigma)
        return step

    def predicted_reduction(step: np.ndarray) -> float:
        b_step = mem.matvec(step)
        return float(-(g @ step) - 0.5 * (step @ b_step))

    # Interior case: positive definite model with the Newton step inside.
    if lam_min > 0.0 and math.sqrt(shifted_norm_sq(0.0)) <= delta:
        step = build_step(0.0)
        return SubproblemSolution(step, predicted_reduction(step), False)

    sigma_lo = max(0.0, -lam_min)
    critical = np.abs(lam_all - lam_min) <= gap_tol
    a_critical = float(np.linalg.norm(a_all[critical]))
    g_norm = float(np.linalg.norm(g))

    # The projected coefficients carry roundoff of order eps * ||g|| times
    # the basis conditioning, so orthogonality to the leftmost eigenspace is
    # decided at a correspondingly loose threshold.
    if lam_min <= 0.0 and a_critical <= 1e-11 * max(1.0, g_norm):
        # Gradient (numerically) orthogonal to the leftmost eigenspace.
        den = lam_all + sigma_lo
        pseudo_sq = float(
            np.sum(np.where(critical, 0.0, (a_all / np.where(critical, 1.0, den)) ** 2))
        )
        if pseudo_sq <= delta * delta:
            step = build_step(sigma_lo, drop_critical=True)
            if lam_min < 0.0:
                # Hard case proper: extend along the leftmost eigenvector to
                # the boundary (that eigenvalue always lives in the low-rank
                # block because gamma > 0).
                z = _first_nonzero_sign_flip(p_par[:, 0].copy())
                step = _boundary_extension(step, z, delta)
                return SubproblemSolution(
                    step, predicted_reduction(step), True, sigma=float(sigma_lo)
                )
            return SubproblemSolution(
                step, predicted_reduction(step), False, sigma=0.0
            )

    # Boundary case: secular root sigma* > sigma_lo with ||s(sigma*)|| = delta.
    def phi(sigma: float):
        nsq = shifted_norm_sq(sigma)
        norm = math.sqrt(nsq)
        if norm == 0.0 or math.isinf(norm):
            value = (0.0 if math.isinf(norm) else math.inf) - 1.0 / delta
            return value, 0.0
        den = lam_all + sigma
        safe = den != 0.0
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            third = np.where(safe, a_all**2 / np.where(safe, den, 1.0) ** 3, 0.0)
        deriv = float(np.sum(third)) / norm**3
        return 1.0 / norm - 1.0 / delta, deriv

    sigma_hi = sigma_lo + g_norm / delta
    while phi(sigma_hi)[0] < 0.0:
        sigma_hi = sigma_lo + 2.0 * (sigma_hi - sigma_lo) + 1.0
    # Reciprocal-norm residual tolerance; tight enough that the step lands
    # within one part in 1e10 of the boundary.
    tol = 1e-11 / delta
    x0 = min(max(sigma_lo + g_norm / delta * 0.5, sigma_lo), sigma_hi)
    try:
        sigma_star = newton_root(phi, x0, tol, bracket=(sigma_lo, sigma_hi))
    except RootFindError:
        # The root is numerically indistinguishable from the pole: resolve
        # as a hard case when that is consistent, otherwise re-raise.
        pseudo = build_step(sigma_lo, drop_critical=True)
        pn = float(np.linalg.norm(pseudo))
        if lam_min < 0.0 and pn <= delta:
            z = _first_nonzero_sign_flip(p_par[:, 0].copy())
            step = _boundary_extension(pseudo, z, delta)
            return SubproblemSolution(
                step, predicted_reduction(step), True, sigma=float(sigma_lo)
            )
        raise
    step = build_step(sigma_star)
    norm = float(np.linalg.norm(step))
    if norm > delta:
        step *= delta / norm
    return SubproblemSolution(
        step, predicted_reduction(step), True, sigma=float(sigma_star)
    )


def solve_trs_dense(b, grad, delta: float) -> SubproblemSolution:
    """Reference 2-norm trust-region solve via full eigendecomposition.

    Intended for cross-checking :func:`solve_obs` on small instances
    (dimension <= 64).  Uses LAPACK's symmetric eigensolver and Brent root
    finding, so it shares nothing with the compact-form route.
    """
    if delta <= 0.0:
        raise SubproblemError(f"delta must be positive, got {delta}")
    b = np.asarray(b, dtype=float)
    g = _check_grad(grad)
    n = g.shape[0]
    if b.shape != (n, n):
        raise SubproblemError(f"matrix shape {b.shape} does not match gradient dim {n}")
    if n > 64:
        raise SubproblemError("dense reference solver is limited to dimension 64")
    if not np.all(np.isfinite(b)):
        raise SubproblemError("matrix has non-finite entries")
    asym = float(np.max(np.abs(b - b.T)))
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(b)))):
        raise SubproblemError(f"matrix is not symmetric (max |B - B^T| = {asym:.3e})")

    w, q = scipy.linalg.eigh(0.5 * (b + b.T))
    a = q.T @ g
    lam_min = float(w[0])
    gap = 1e-12 * max(1.0, float(np.max(np.abs(w))))
    critical = np.abs(w - lam_min) <= gap

    def coeffs(sigma: float, drop_critical: bool = False) -> np.ndarray:
        den = w + sigma
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(den != 0.0, -a / den, 0.0)
        if drop_critical:
            c = np.where(np.abs(den) <= gap, 0.0, c)
        return c

    def norm_at(sigma: float) -> float:
        den = w + sigma
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            terms = (a / den) ** 2
        terms = np.where((den == 0.0) & (a == 0.0), 0.0, terms)
        total = float(np.sum(terms))
        return math.sqrt(total) if math.isfinite(total) else math.inf

    def finish(sigma: float, s: np.ndarray, boundary: bool) -> SubproblemSolution:
        predicted = float(-(g @ s) - 0.5 * (s @ (b @ s)))
        return SubproblemSolution(s, predicted, boundary, sigma=float(sigma))

    if lam_min > 0.0 and norm_at(0.0) <= delta:
        return finish(0.0, q @ coeffs(0.0), False)

    sigma_lo = max(0.0, -lam_min)
    a_critical = float(np.linalg.norm(a[critical]))
    if lam_min <= 0.0 and a_critical <= 1e-13 * max(1.0, float(np.linalg.norm(a))):
        pseudo = q @ coeffs(sigma_lo, drop_critical=True)
        pn = float(np.linalg.norm(pseudo))
        if pn <= delta:
            if lam_min < 0.0:
                z = q[:, 0].copy()
                nz = np.nonzero(z)[0]
                if nz.size and z[nz[0]] > 0.0:
                    z = -z
                sz = float(pseudo @ z)
                alpha = -sz + math.sqrt(max(sz * sz + delta * delta - pn * pn, 0.0))
                return finish(sigma_lo, pseudo + alpha * z, True)
            return finish(0.0, pseudo, False)

    if float(np.linalg.norm(g)) == 0.0:
        return SubproblemSolution(np.zeros_like(g), 0.0, False, converged=True)

    def phi(sigma: float) -> float:
        nrm = norm_at(sigma)
        if nrm == 0.0:
            return math.inf
        if math.isinf(nrm):
            return -1.0 / delta
        return 1.0 / nrm - 1.0 / delta

    hi = sigma_lo + float(np.linalg.norm(g)) / delta
    while phi(hi) < 0.0:
        hi = sigma_lo + 2.0 * (hi - sigma_lo) + 1.0
    lo = sigma_lo
    if phi(lo) > 0.0:  # should have been caught above; guard roundoff
        lo = max(0.0, sigma_lo - gap)
    sigma_star = scipy.optimize.brentq(phi, lo, hi, xtol=1e-14, rtol=8.9e-16, maxiter=200)
    s = q @ coeffs(sigma_star)
    norm = float(np.linalg.norm(s))
    if norm > delta:
        s *= delta / norm
    return finish(sigma_star, s, True)
