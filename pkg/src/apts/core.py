"""Additively preconditioned trust-region training (APTS / SAPTS).

One step works on a snapshot of the flat parameter vector: the segments are
split into disjoint subdomains, each subdomain runs a few trust-region
iterations with everything else frozen and a cumulative-step budget equal to
the current global radius, the local results are summed back through
zero-padding, an optional forced-decreasing-loss safeguard blends that
aggregate with the scaled negative gradient until the loss actually drops,
and finally one global trust-region step runs from the blended point.

Run on the full dataset this is APTS; run per mini-batch it is SAPTS.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .data import BatchPlan, Dataset, make_batches
from .lsr1 import Lsr1Memory
from .model import Batch, MlpSpec, ParamVector, evaluate, init_params, loss_and_grad
from .trloop import TrConfig, TrState, tr_step

__all__ = [
    "AptsError",
    "Partition",
    "AptsConfig",
    "FdlTrace",
    "AptsStepRecord",
    "EpochMetrics",
    "LocalResult",
    "make_partition",
    "local_solve",
    "aggregate",
    "fdl_safeguard",
    "apts_step",
    "run_apts",
    "MaskedObjective",
]

_BOUND_SLACK = 1e-12


class AptsError(ValueError):
    """Invalid decomposition input or violated aggregation contract."""


@dataclass(frozen=True)
class Partition:
    """Disjoint assignment of whole parameter segments to subdomains."""

    subdomain_count: int
    assignment: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        seen = [idx for group in self.assignment for idx in group]
        if len(set(seen)) != len(seen):
            raise AptsError("segment assigned to two subdomains")
        sizes = [len(group) for group in self.assignment]
        if sizes and max(sizes) - min(sizes) > 1:
            raise AptsError("subdomain sizes differ by more than one segment")

    def coords(self, params: ParamVector, subdomain: int) -> np.ndarray:
        """Sorted flat-vector indices covered by one subdomain."""
        pieces = [
            np.arange(params.segments[i].offset, params.segments[i].offset + params.segments[i].length)
            for i in self.assignment[subdomain]
        ]
        return np.sort(np.concatenate(pieces)) if pieces else np.empty(0, dtype=np.intp)


def make_partition(segment_count: int, subdomain_count: int, seed: int) -> Partition:
    """Shuffle the segments by seed and deal them round-robin."""
    if subdomain_count < 1 or subdomain_count > segment_count:
        raise AptsError(
            f"need 1 <= subdomains <= {segment_count}, got {subdomain_count}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(segment_count)
    groups = tuple(
        tuple(int(s) for s in order[i::subdomain_count]) for i in range(subdomain_count)
    )
    return Partition(subdomain_count, groups)


@dataclass(frozen=True)
class AptsConfig:
    """Knobs of one APTS/SAPTS run.

    ``fdl`` enables the forced-decreasing-loss safeguard.  ``workers`` > 0
    runs the local solves on a thread pool; results are identical either way
    because aggregation always happens in subdomain order.
    """

    tr: TrConfig
    subdomain_count: int = 2
    partition_seed: int = 0
    local_iters: int = 5
    fdl: bool = True
    workers: int = 0

    def __post_init__(self):
        if self.local_iters < 1:
            raise AptsError("local_iters must be >= 1")
        if self.subdomain_count < 1:
            raise AptsError("subdomain_count must be >= 1")


@dataclass(frozen=True)
class FdlTrace:
    """What the safeguard loop did in one step."""

    activations: int
    final_w: float
    final_delta: float


@dataclass(frozen=True)
class AptsStepRecord:
    loss_before: float
    loss_half: float
    loss_after: float
    rho: float
    delta_before: float
    delta_after: float
    precond_norm_inf: float
    global_accepted: bool
    fdl: FdlTrace
    local_iterations: Tuple[int, ...]
    converged: bool = False


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    global_radius: float
    fdl_activations: int
    wall_seconds: float = 0.0


class MaskedObjective:
    """Loss/gradient provider for a network with only some segments
    trainable, viewed through the coordinates of those segments.

    ``coords=None`` means the full vector (all segments trainable).
    """

    def __init__(
        self,
        template: ParamVector,
        batch: Batch,
        mask: FrozenSet[int],
        coords: Optional[np.ndarray] = None,
    ):
        self._template = template
        self._batch = batch
        self._mask = mask
        self._coords = coords

    def _full(self, x: np.ndarray) -> ParamVector:
        if self._coords is None:
            return ParamVector(x, self._template.segments)
        values = self._template.values.copy()
        values[self._coords] = x
        return ParamVector(values, self._template.segments)

    def value(self, x: np.ndarray) -> float:
        loss, _ = evaluate(self._full(x), self._batch)
        return loss

    def value_and_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        loss, grad = loss_and_grad(self._full(x), self._batch, self._mask)
        if self._coords is None:
            return loss, grad
        return loss, grad[self._coords]


@dataclass(frozen=True)
class LocalResult:
    values: np.ndarray
    iterations: int


def local_solve(
    params: ParamVector,
    partition: Partition,
    subdomain: int,
    batch: Batch,
    delta_g: float,
    config: AptsConfig,
    global_memory: Optional[Lsr1Memory],
) -> LocalResult:
    """Trust-region iterations on one subdomain with a step budget.

    Runs at most ``config.local_iters`` steps with only the subdomain's
    segments trainable.  The local radius starts at the global one, its
    minimum is zero, and its maximum shrinks to the remaining budget
    ``delta_g - ||x - x0||_inf`` every iteration, so the total displacement
    never exceeds the global radius.  For second-order models the local
    memory starts as the coordinate restriction of the global one.
    """
    if delta_g <= 0.0:
        raise AptsError(f"delta_g must be positive, got {delta_g}")
    coords = partition.coords(params, subdomain)
    mask = frozenset(partition.assignment[subdomain])
    objective = MaskedObjective(params, batch, mask, coords)
    x0 = params.values[coords].copy()
    x = x0.copy()

    memory = None
    if config.tr.order == 2:
        base = global_memory if global_memory is not None else Lsr1Memory(config.tr.history)
        memory = base.restrict(coords)
    state = TrState(delta=delta_g, memory=memory)
    cached = None
    iterations = 0
    for _ in range(config.local_iters):
        budget = delta_g - float(np.max(np.abs(x - x0)) if x.size else 0.0)
        if budget <= 0.0:
            break
        local_cfg = replace(
            config.tr,
            delta_init=min(delta_g, budget),
            delta_min=0.0,
            delta_max=budget,
        )
        state = replace(state, delta=min(state.delta, budget))
        result = tr_step(x, objective, state, local_cfg, cached=cached)
        x, state, cached = result.params, result.state, result.cached
        iterations += 1
        if result.record.converged:
            break
    return LocalResult(x, iterations)


def aggregate(
    theta: np.ndarray,
    results: Sequence[LocalResult],
    partition: Partition,
    params_template: ParamVector,
) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-pad and sum the local results into the full vector.

    Returns ``(theta_tilde, step)`` with ``step = theta_tilde - theta``.
    Summation runs in subdomain-index order so the result does not depend on
    which local solve finished first.  Any coordinate covered twice is a
    contract violation and raises.
    """
    if len(results) != partition.subdomain_count:
        raise AptsError("missing local results")
    theta_tilde = theta.copy()
    touched = np.zeros(theta.shape[0], dtype=np.int8)
    for i, result in enumerate(results):
        coords = partition.coords(params_template, i)
        if np.any(touched[coords]):
            raise AptsError("subdomains overlap: aggregation would double-count")
        touched[coords] = 1
        theta_tilde[coords] = result.values
    return theta_tilde, theta_tilde - theta


def fdl_safeguard(
    theta_k: np.ndarray,
    step: np.ndarray,
    g_scaled: np.ndarray,
    loss_old: float,
    delta_g: float,
    value_fn,
    enabled: bool,
    delta_min: float,
    alpha: float,
) -> Tuple[np.ndarray, FdlTrace, float]:
    """Dogleg-style safeguard on the aggregated step.

    Starting from ``theta_k + step``, while the loss exceeds ``loss_old``
    the blend weight w moves toward the scaled negative gradient in steps of
    0.2 and the radius shrinks by ``alpha`` (floored at ``delta_min``); the
    candidate is the blend rescaled to infinity-norm length of the shrunken
    radius.  At w = 1 the step is the pure gradient direction and the loop
    stops regardless of the loss.  Disabled, the initial point is returned
    untouched.
    """
    theta_half = theta_k + step
    delta_t = delta_g
    if not enabled:
        return theta_half, FdlTrace(0, 0.0, delta_t), delta_t
    activations = 0
    w = 0.0
    loss_half = value_fn(theta_half)
    while loss_half > loss_old and w < 1.0:
        activations += 1
        w = min(activations, 5) / 5.0
        delta_t = max(delta_min, alpha * delta_t)
        blend = w * g_scaled + (1.0 - w) * step
        blend_inf = float(np.max(np.abs(blend)) if blend.size else 0.0)
        if blend_inf == 0.0:
            return theta_k.copy(), FdlTrace(activations, w, delta_t), delta_t
        theta_half = theta_k + (delta_t / blend_inf) * blend
        if w >= 1.0:
            break
        loss_half = value_fn(theta_half)
    return theta_half, FdlTrace(activations, w, delta_t), delta_t


def _run_local_solves(params, partition, batch, delta_g, config, memory):
    tasks = range(partition.subdomain_count)
    if config.workers > 0:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(
                    local_solve, params, partition, i, batch, delta_g, config, memory
                )
                for i in tasks
            ]
            return [f.result() for f in futures]
    return [
        local_solve(params, partition, i, batch, delta_g, config, memory)
        for i in tasks
    ]


def apts_step(
    params: ParamVector,
    batch: Batch,
    partition: Partition,
    state: TrState,
    config: AptsConfig,
) -> Tuple[ParamVector, TrState, AptsStepRecord]:
    """One preconditioned step: local solves, aggregation, safeguard, and a
    single global trust-region iteration."""
    mask = frozenset(range(len(params.segments)))
    objective = MaskedObjective(params, batch, mask)
    loss_k, grad_k = objective.value_and_grad(params.values)
    grad_inf = float(np.max(np.abs(grad_k)))
    if grad_inf == 0.0:
        trace = FdlTrace(0, 0.0, state.delta)
        record = AptsStepRecord(
            loss_k, loss_k, loss_k, 0.0, state.delta, state.delta, 0.0, False, trace,
            tuple(0 for _ in range(partition.subdomain_count)), converged=True,
        )
        return params, state, record

    delta_g = state.delta
    g_scaled = (-delta_g / grad_inf) * grad_k

    results = _run_local_solves(params, partition, batch, delta_g, config, state.memory)
    theta_tilde, step = aggregate(params.values, results, partition, params)
    precond_inf = float(np.max(np.abs(step)))
    if precond_inf > delta_g + _BOUND_SLACK:
        raise AptsError(
            f"preconditioning step {precond_inf} exceeds the global radius {delta_g}"
        )

    theta_half, trace, delta_adjusted = fdl_safeguard(
        params.values,
        step,
        g_scaled,
        loss_k,
        delta_g,
        objective.value,
        config.fdl,
        config.tr.delta_min,
        config.tr.alpha,
    )

    state = replace(state, delta=delta_adjusted)
    result = tr_step(theta_half, objective, state, config.tr)
    record = AptsStepRecord(
        loss_before=loss_k,
        loss_half=result.loss_start,
        loss_after=result.record.loss,
        rho=result.record.rho,
        delta_before=delta_g,
        delta_after=result.state.delta,
        precond_norm_inf=precond_inf,
        global_accepted=result.accepted,
        fdl=trace,
        local_iterations=tuple(r.iterations for r in results),
    )
    return ParamVector(result.params, params.segments), result.state, record


@dataclass
class AptsRun:
    params: ParamVector
    epochs: List[EpochMetrics]
    steps: List[AptsStepRecord]


def run_apts(
    train: Dataset,
    spec: MlpSpec,
    config: AptsConfig,
    epochs: int,
    *,
    plan: Optional[BatchPlan] = None,
    test: Optional[Dataset] = None,
    initial: Optional[ParamVector] = None,
) -> AptsRun:
    """Train for a number of epochs; full-batch when ``plan`` is None.

    One epoch runs :func:`apts_step` once per mini-batch (once overall in
    full-batch mode, which is simply the single-batch plan).  Metrics are
    evaluated against the full training set and, when given, the test set
    after every epoch.  Fully deterministic for fixed seeds.
    """
    if epochs < 0:
        raise AptsError("epochs must be >= 0")
    params = initial.copy() if initial is not None else init_params(spec)
    partition = make_partition(len(params.segments), config.subdomain_count, config.partition_seed)
    if plan is None:
        plan = make_batches(train, 1, 0.0, seed=config.partition_seed)
    state = config.tr.initial_state()

    train_batch = train.batch()
    test_batch = test.batch() if test is not None else None

    def snapshot(epoch: int, fdl_count: int, wall: float) -> EpochMetrics:
        train_loss, _ = evaluate(params, train_batch)
        if test_batch is not None:
            test_loss, test_acc = evaluate(params, test_batch)
        else:
            test_loss, test_acc = float("nan"), float("nan")
        return EpochMetrics(
            epoch, train_loss, test_loss, test_acc, state.delta, fdl_count, wall
        )

    epoch_records = [snapshot(0, 0, 0.0)]
    step_records: List[AptsStepRecord] = []
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        fdl_count = 0
        for indices in plan:
            batch = train.batch(indices)
            params, state, record = apts_step(params, batch, partition, state, config)
            step_records.append(record)
            fdl_count += record.fdl.activations
        epoch_records.append(snapshot(epoch, fdl_count, time.perf_counter() - started))
    return AptsRun(params, epoch_records, step_records)
