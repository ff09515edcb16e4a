"""Generic trust-region iteration: model, acceptance ratio, radius policy.

The same loop serves three roles: the standalone TR baseline, the global
pass of the additively preconditioned step, and the inner iteration of each
local solve.  Objectives are duck-typed: anything with ``value(x)`` and
``value_and_grad(x)`` works (see :class:`FunctionObjective`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from .lsr1 import Lsr1Memory
from .subproblem import solve_first_order, solve_obs

__all__ = [
    "TrConfigError",
    "TrConfig",
    "TrState",
    "TrRecord",
    "FunctionObjective",
    "rho",
    "update_radius",
    "tr_step",
    "tr_minimize",
    "DEGENERATE_RHO",
]

# Degenerate predicted reductions are mapped to this value, which fails the
# rho >= eta1 acceptance test by construction.
DEGENERATE_RHO = -math.inf

_PREDICTED_GUARD = 1e-14


class TrConfigError(ValueError):
    """Inconsistent trust-region parameters."""


@dataclass(frozen=True)
class TrConfig:
    """Radii, acceptance thresholds and model order of one TR instance."""

    delta_init: float
    delta_min: float
    delta_max: float
    eta1: float = 0.25
    eta2: float = 0.75
    alpha: float = 0.5
    beta: float = 2.0
    order: int = 1
    history: int = 5

    def __post_init__(self):
        if not 0.0 < self.eta1 < self.eta2 < 1.0:
            raise TrConfigError(f"need 0 < eta1 < eta2 < 1, got {self.eta1}, {self.eta2}")
        if not 0.0 < self.alpha < 1.0 < self.beta:
            raise TrConfigError(f"need 0 < alpha < 1 < beta, got {self.alpha}, {self.beta}")
        if not (0.0 <= self.delta_min <= self.delta_init <= self.delta_max):
            raise TrConfigError(
                f"need delta_min <= delta_init <= delta_max, got "
                f"{self.delta_min}, {self.delta_init}, {self.delta_max}"
            )
        if self.delta_init <= 0.0:
            raise TrConfigError("delta_init must be positive")
        if self.order not in (1, 2):
            raise TrConfigError(f"order must be 1 or 2, got {self.order}")
        if self.history < 0:
            raise TrConfigError("history must be >= 0")

    def initial_state(self) -> "TrState":
        memory = Lsr1Memory(self.history) if self.order == 2 else None
        return TrState(self.delta_init, memory)


@dataclass(frozen=True)
class TrState:
    """Mutable-through-replacement loop state of one TR instance."""

    delta: float
    memory: Optional[Lsr1Memory] = None
    iteration: int = 0


@dataclass(frozen=True)
class TrRecord:
    """Per-iteration log line."""

    iteration: int
    loss: float
    rho: float
    delta: float
    accepted: bool
    step_norm_inf: float = 0.0
    converged: bool = False


class FunctionObjective:
    """Adapter turning plain (f, grad_f) callables into an objective."""

    def __init__(self, f: Callable, grad: Callable):
        self._f = f
        self._grad = grad

    def value(self, x: np.ndarray) -> float:
        return float(self._f(x))

    def value_and_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        return float(self._f(x)), np.asarray(self._grad(x), dtype=float)


def rho(actual: float, predicted: float) -> float:
    """Acceptance ratio actual/predicted, or -inf when the predicted
    reduction is too small to divide by (treated as reject-and-shrink)."""
    if predicted > _PREDICTED_GUARD * (1.0 + abs(actual)):
        return actual / predicted
    return DEGENERATE_RHO


def update_radius(state: TrState, rho_value: float, config: TrConfig):
    """Radius policy: grow on very successful steps, hold on successful
    ones, shrink on rejections; always clamped to [delta_min, delta_max]."""
    if rho_value >= config.eta2:
        return replace(state, delta=min(config.beta * state.delta, config.delta_max)), True
    if rho_value >= config.eta1:
        return state, True
    return replace(state, delta=max(config.alpha * state.delta, config.delta_min)), False


@dataclass(frozen=True)
class TrStepResult:
    params: np.ndarray
    state: TrState
    accepted: bool
    record: TrRecord
    cached: Optional[Tuple[float, np.ndarray]] = None
    loss_start: float = float("nan")


def tr_step(
    params: np.ndarray,
    objective,
    state: TrState,
    config: TrConfig,
    cached: Optional[Tuple[float, np.ndarray]] = None,
) -> TrStepResult:
    """One accept-or-reject trust-region iteration.

    ``cached`` may carry (loss, grad) already evaluated at ``params`` to
    save one objective call.  On acceptance the returned ``cached`` holds
    the evaluation at the new point whenever the step computed it.
    """
    loss0, grad0 = cached if cached is not None else objective.value_and_grad(params)
    if not np.all(np.isfinite(grad0)):
        raise FloatingPointError("gradient is not finite")
    grad_inf = float(np.max(np.abs(grad0))) if grad0.size else 0.0
    if grad_inf == 0.0:
        record = TrRecord(state.iteration, loss0, 0.0, state.delta, False, converged=True)
        return TrStepResult(
            params, replace(state, iteration=state.iteration + 1), False, record,
            loss_start=loss0,
        )

    if config.order == 1:
        solution = solve_first_order(grad0, state.delta)
    else:
        solution = solve_obs(state.memory, grad0, state.delta)
    if solution.converged:
        record = TrRecord(state.iteration, loss0, 0.0, state.delta, False, converged=True)
        return TrStepResult(
            params, replace(state, iteration=state.iteration + 1), False, record,
            loss_start=loss0,
        )

    candidate = params + solution.step
    grad1 = None
    if config.order == 1:
        loss1 = objective.value(candidate)
    else:
        loss1, grad1 = objective.value_and_grad(candidate)

    ratio = rho(loss0 - loss1, solution.predicted_reduction)
    new_state, accepted = update_radius(state, ratio, config)
    step_inf = float(np.max(np.abs(solution.step)))
    new_state = replace(new_state, iteration=state.iteration + 1)

    if accepted:
        if config.order == 2 and grad1 is not None:
            new_state = replace(
                new_state, memory=new_state.memory.update(solution.step, grad1 - grad0)
            )
        record = TrRecord(state.iteration, loss1, ratio, new_state.delta, True, step_inf)
        next_cache = (loss1, grad1) if grad1 is not None else None
        return TrStepResult(candidate, new_state, True, record, next_cache, loss_start=loss0)

    record = TrRecord(state.iteration, loss0, ratio, new_state.delta, False, step_inf)
    return TrStepResult(params, new_state, False, record, (loss0, grad0), loss_start=loss0)


def tr_minimize(
    params: np.ndarray,
    objective,
    config: TrConfig,
    max_iters: int,
    grad_tol: float = 0.0,
) -> Tuple[np.ndarray, List[TrRecord]]:
    """Iterate :func:`tr_step` until ``max_iters`` or the infinity norm of
    the gradient drops to ``grad_tol``."""
    x = np.asarray(params, dtype=float).copy()
    state = config.initial_state()
    records: List[TrRecord] = []
    cached: Optional[Tuple[float, np.ndarray]] = None
    for _ in range(max_iters):
        loss, grad = cached if cached is not None else objective.value_and_grad(x)
        grad_inf = float(np.max(np.abs(grad))) if grad.size else 0.0
        if grad_inf <= grad_tol:
            break
        result = tr_step(x, objective, state, config, cached=(loss, grad))
        x, state = result.params, result.state
        records.append(result.record)
        cached = result.cached
        if result.record.converged:
            break
    return x, records
