"""Reference optimizers run against the same model and metrics pipeline:
full-batch gradient descent, SGD with momentum, and Adam."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .core import EpochMetrics
from .data import BatchPlan, Dataset, make_batches
from .model import Batch, MlpSpec, ParamVector, evaluate, full_mask, init_params, loss_and_grad

__all__ = [
    "BaselineError",
    "BaselineConfig",
    "BaselineState",
    "baseline_step",
    "run_baseline",
    "BaselineRun",
]

KINDS = ("gd", "sgd", "adam")


class BaselineError(ValueError):
    """Invalid baseline configuration."""


@dataclass(frozen=True)
class BaselineConfig:
    kind: str
    learning_rate: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BaselineError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.learning_rate <= 0.0:
            raise BaselineError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise BaselineError("momentum must be in [0, 1)")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise BaselineError("betas must be in (0, 1)")


@dataclass
class BaselineState:
    velocity: Optional[np.ndarray] = None
    first_moment: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None
    step_count: int = 0


def baseline_step(
    params: ParamVector, batch: Batch, state: BaselineState, config: BaselineConfig
):
    """One optimizer update on a batch; returns (params, state, loss)."""
    loss, grad = loss_and_grad(params, batch, full_mask(params))
    values = params.values
    if config.kind in ("gd", "sgd"):
        if state.velocity is None:
            state.velocity = np.zeros_like(values)
        state.velocity = config.momentum * state.velocity + grad
        values = values - config.learning_rate * state.velocity
    else:  # adam
        if state.first_moment is None:
            state.first_moment = np.zeros_like(values)
            state.second_moment = np.zeros_like(values)
        state.step_count += 1
        t = state.step_count
        state.first_moment = config.beta1 * state.first_moment + (1 - config.beta1) * grad
        state.second_moment = config.beta2 * state.second_moment + (1 - config.beta2) * grad**2
        m_hat = state.first_moment / (1 - config.beta1**t)
        v_hat = state.second_moment / (1 - config.beta2**t)
        values = values - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return ParamVector(values, params.segments), state, loss


@dataclass
class BaselineRun:
    params: ParamVector
    epochs: List[EpochMetrics]


def run_baseline(
    train: Dataset,
    spec: MlpSpec,
    config: BaselineConfig,
    epochs: int,
    *,
    plan: Optional[BatchPlan] = None,
    test: Optional[Dataset] = None,
    initial: Optional[ParamVector] = None,
) -> BaselineRun:
    """Epoch driver matching the preconditioned runs: one optimizer step per
    mini-batch per epoch (full batch when ``plan`` is None)."""
    if epochs < 0:
        raise BaselineError("epochs must be >= 0")
    params = initial.copy() if initial is not None else init_params(spec)
    if plan is None:
        plan = make_batches(train, 1, 0.0, seed=config.seed)
    state = BaselineState()
    train_batch = train.batch()
    test_batch = test.batch() if test is not None else None

    def snapshot(epoch: int, wall: float) -> EpochMetrics:
        train_loss, _ = evaluate(params, train_batch)
        if test_batch is not None:
            test_loss, test_acc = evaluate(params, test_batch)
        else:
            test_loss, test_acc = float("nan"), float("nan")
        return EpochMetrics(epoch, train_loss, test_loss, test_acc, 0.0, 0, wall)

    records = [snapshot(0, 0.0)]
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        for indices in plan:
            params, state, _ = baseline_step(params, train.batch(indices), state, config)
        records.append(snapshot(epoch, time.perf_counter() - started))
    return BaselineRun(params, records)
