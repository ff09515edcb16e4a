import numpy as np
import pytest

from apts.core import (
    AptsConfig,
    AptsError,
    FdlTrace,
    LocalResult,
    MaskedObjective,
    Partition,
    aggregate,
    apts_step,
    fdl_safeguard,
    local_solve,
    make_partition,
    run_apts,
)
from apts.data import make_batches, make_synthetic
from apts.model import Batch, MlpSpec, ParamVector, full_mask, init_params, loss_and_grad
from apts.trloop import TrConfig, TrState, tr_step

TR = TrConfig(delta_init=1e-2, delta_min=1e-4, delta_max=1e-1, order=1)


def toy_setup(seed=0, widths=(4, 3, 2), samples=20):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(widths, seed=seed)
    params = init_params(spec)
    batch = Batch(rng.uniform(size=(samples, widths[0])), rng.integers(0, widths[-1], samples))
    return spec, params, batch


class TestMakePartition:
    def test_six_segments_two_subdomains(self):
        p = make_partition(6, 2, seed=0)
        assert sorted(len(g) for g in p.assignment) == [3, 3]

    def test_six_segments_four_subdomains(self):
        p = make_partition(6, 4, seed=0)
        assert sorted(len(g) for g in p.assignment) == [1, 1, 2, 2]

    def test_single_subdomain_holds_everything(self):
        p = make_partition(6, 1, seed=3)
        assert len(p.assignment) == 1
        assert sorted(p.assignment[0]) == list(range(6))

    def test_disjoint_cover(self):
        p = make_partition(9, 4, seed=11)
        seen = sorted(i for g in p.assignment for i in g)
        assert seen == list(range(9))

    def test_deterministic_and_seed_sensitive(self):
        assert make_partition(8, 3, seed=5) == make_partition(8, 3, seed=5)
        different = [make_partition(8, 3, seed=s).assignment for s in range(20)]
        assert len({d for d in different}) > 1

    def test_too_many_subdomains(self):
        with pytest.raises(AptsError):
            make_partition(4, 5, seed=0)

    def test_overlapping_assignment_rejected(self):
        with pytest.raises(AptsError):
            Partition(2, ((0, 1), (1, 2)))


class TestLocalSolve:
    def test_budget_exhausted_after_first_accepted_step(self):
        spec, params, batch = toy_setup(seed=1)
        partition = make_partition(spec.segment_count, 2, seed=0)
        config = AptsConfig(tr=TR, subdomain_count=2, local_iters=5)
        # Tiny radius: the first-order model is accurate, the step is
        # accepted at full length, and the budget is spent at once.
        result = local_solve(params, partition, 0, batch, 1e-3, config, None)
        coords = partition.coords(params, 0)
        moved = np.abs(result.values - params.values[coords]).max()
        assert moved == pytest.approx(1e-3, rel=1e-12)
        assert result.iterations == 1

    def test_zero_gradient_subdomain_is_noop(self):
        # Zero inputs kill the first-layer weight gradient.
        spec = MlpSpec((2, 2), seed=0)
        params = init_params(spec)
        batch = Batch(np.zeros((4, 2)), np.array([0, 1, 0, 1]))
        partition = Partition(2, ((0,), (1,)))  # weights | bias
        config = AptsConfig(tr=TR, subdomain_count=2)
        result = local_solve(params, partition, 0, batch, 1e-2, config, None)
        coords = partition.coords(params, 0)
        assert np.array_equal(result.values, params.values[coords])

    def test_displacement_never_exceeds_global_radius(self):
        spec, params, batch = toy_setup(seed=2)
        partition = make_partition(spec.segment_count, 2, seed=1)
        config = AptsConfig(tr=TR, subdomain_count=2, local_iters=5)
        for sub in range(2):
            result = local_solve(params, partition, sub, batch, 5e-2, config, None)
            coords = partition.coords(params, sub)
            assert np.abs(result.values - params.values[coords]).max() <= 5e-2 + 1e-15

    def test_local_losses_non_increasing(self):
        spec, params, batch = toy_setup(seed=3)
        partition = make_partition(spec.segment_count, 2, seed=2)
        config = AptsConfig(tr=TR, subdomain_count=2, local_iters=5)
        for sub in range(2):
            coords = partition.coords(params, sub)
            mask = frozenset(partition.assignment[sub])
            objective = MaskedObjective(params, batch, mask, coords)
            before = objective.value(params.values[coords])
            result = local_solve(params, partition, sub, batch, 1e-2, config, None)
            after = objective.value(result.values)
            assert after <= before + 1e-15

    def test_second_order_uses_restricted_memory(self):
        spec, params, batch = toy_setup(seed=4)
        tr2 = TrConfig(delta_init=1e-2, delta_min=1e-4, delta_max=1e-1, order=2, history=5)
        partition = make_partition(spec.segment_count, 2, seed=0)
        config = AptsConfig(tr=tr2, subdomain_count=2, local_iters=3)
        from apts.lsr1 import Lsr1Memory

        mem = Lsr1Memory(capacity=5)
        rng = np.random.default_rng(0)
        for _ in range(3):
            mem = mem.update(rng.standard_normal(spec.param_count), rng.standard_normal(spec.param_count))
        result = local_solve(params, partition, 0, batch, 1e-2, config, mem)
        coords = partition.coords(params, 0)
        assert np.abs(result.values - params.values[coords]).max() <= 1e-2 + 1e-15


class TestAggregate:
    def test_unchanged_results_give_zero_step(self):
        spec, params, _ = toy_setup()
        partition = make_partition(spec.segment_count, 2, seed=0)
        results = [
            LocalResult(params.values[partition.coords(params, i)].copy(), 0)
            for i in range(2)
        ]
        theta_tilde, step = aggregate(params.values, results, partition, params)
        assert np.array_equal(theta_tilde, params.values)
        assert np.all(step == 0.0)

    def test_disjoint_updates_land_in_their_coordinates(self):
        spec, params, _ = toy_setup()
        partition = make_partition(spec.segment_count, 2, seed=0)
        results = []
        for i in range(2):
            coords = partition.coords(params, i)
            values = params.values[coords] + (i + 1.0)
            results.append(LocalResult(values, 1))
        theta_tilde, step = aggregate(params.values, results, partition, params)
        for i in range(2):
            coords = partition.coords(params, i)
            assert np.allclose(step[coords], i + 1.0)
        assert np.count_nonzero(step) == params.size

    def test_overlap_detected(self):
        spec, params, _ = toy_setup()
        # Two "subdomains" sharing segment 0; built directly to bypass the
        # Partition validity check and exercise the aggregation guard.
        bogus = Partition.__new__(Partition)
        object.__setattr__(bogus, "subdomain_count", 2)
        object.__setattr__(bogus, "assignment", ((0, 1), (0, 2)))
        results = [
            LocalResult(params.values[bogus.coords(params, i)].copy(), 0) for i in range(2)
        ]
        with pytest.raises(AptsError, match="overlap"):
            aggregate(params.values, results, bogus, params)

    def test_missing_results_rejected(self):
        spec, params, _ = toy_setup()
        partition = make_partition(spec.segment_count, 2, seed=0)
        with pytest.raises(AptsError):
            aggregate(params.values, [], partition, params)


class ScriptedLoss:
    """Deterministic stand-in loss evaluator for safeguard tests."""

    def __init__(self, losses):
        self.losses = list(losses)
        self.calls = 0

    def __call__(self, _theta):
        value = self.losses[min(self.calls, len(self.losses) - 1)]
        self.calls += 1
        return value


class TestFdlSafeguard:
    THETA = np.array([1.0, 2.0, 3.0])
    STEP = np.array([0.01, -0.01, 0.0])
    G = np.array([-0.01, 0.0, 0.01])  # scaled negative gradient, inf norm = delta

    def test_immediate_success_no_loop(self):
        fn = ScriptedLoss([0.5])
        theta_half, trace, delta = fdl_safeguard(
            self.THETA, self.STEP, self.G, 1.0, 0.01, fn, True, 1e-4, 0.5
        )
        assert np.allclose(theta_half, self.THETA + self.STEP)
        assert trace == FdlTrace(0, 0.0, 0.01)
        assert delta == 0.01
        assert fn.calls == 1

    def test_disabled_returns_untouched_without_probe(self):
        fn = ScriptedLoss([99.0])
        theta_half, trace, delta = fdl_safeguard(
            self.THETA, self.STEP, self.G, 1.0, 0.01, fn, False, 1e-4, 0.5
        )
        assert np.allclose(theta_half, self.THETA + self.STEP)
        assert trace.activations == 0
        assert fn.calls == 0

    def test_one_failure_then_success(self):
        fn = ScriptedLoss([2.0, 0.5])  # initial probe fails, first blend works
        theta_half, trace, delta = fdl_safeguard(
            self.THETA, self.STEP, self.G, 1.0, 0.01, fn, True, 1e-4, 0.5
        )
        assert trace.final_w == pytest.approx(0.2)
        assert trace.activations == 1
        assert delta == pytest.approx(0.005)  # max(1e-4, 0.5 * 0.01)
        blend = 0.2 * self.G + 0.8 * self.STEP
        expected = self.THETA + (0.005 / np.abs(blend).max()) * blend
        assert np.allclose(theta_half, expected)

    def test_saturates_at_pure_gradient(self):
        fn = ScriptedLoss([2.0] * 10)  # never improves
        theta_half, trace, delta = fdl_safeguard(
            self.THETA, self.STEP, self.G, 1.0, 0.01, fn, True, 1e-4, 0.5
        )
        assert trace.final_w == 1.0
        assert trace.activations == 5
        # final direction is the scaled gradient, re-normalized to delta
        direction = self.G / np.abs(self.G).max()
        assert np.allclose(theta_half, self.THETA + delta * direction)
        assert delta == pytest.approx(max(1e-4, 0.01 * 0.5**5))
        # exactly: initial probe + 4 blend probes (w=1 probe skipped)
        assert fn.calls == 5

    def test_delta_floor_respected(self):
        fn = ScriptedLoss([2.0] * 10)
        _, _, delta = fdl_safeguard(
            self.THETA, self.STEP, self.G, 1.0, 0.01, fn, True, 8e-3, 0.5
        )
        assert delta == 8e-3

    def test_zero_blend_returns_start(self):
        # step and gradient cancel at w = 0.2 -> blend vector is zero.
        step = np.array([0.004, 0.0])
        g = np.array([-0.016, 0.0])
        fn = ScriptedLoss([2.0] * 10)
        theta = np.array([1.0, 1.0])
        theta_half, trace, _ = fdl_safeguard(
            theta, step, g, 1.0, 0.01, fn, True, 1e-4, 0.5
        )
        assert np.array_equal(theta_half, theta)
        assert trace.activations == 1

    def test_w_values_on_grid(self):
        for fails in range(6):
            fn = ScriptedLoss([2.0] * fails + [0.0])
            _, trace, _ = fdl_safeguard(
                self.THETA, self.STEP, self.G, 1.0, 0.01, fn, True, 1e-4, 0.5
            )
            assert trace.final_w in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
            assert trace.activations == min(fails, 5)


class TestAptsStep:
    def test_zero_gradient_short_circuits(self):
        spec = MlpSpec((2, 2), seed=0)
        params = init_params(spec)
        params.values[:] = 0.0
        # Symmetric targets make the gradient vanish at zero parameters:
        # both classes appear equally for identical inputs.
        batch = Batch(np.ones((2, 2)), np.array([0, 1]))
        partition = make_partition(spec.segment_count, 2, seed=0)
        config = AptsConfig(tr=TR, subdomain_count=2)
        state = TR.initial_state()
        new_params, new_state, record = apts_step(params, batch, partition, state, config)
        assert record.converged
        assert np.array_equal(new_params.values, params.values)

    def test_single_subdomain_degenerates_to_masked_tr_plus_global(self):
        spec, params, batch = toy_setup(seed=7)
        partition = make_partition(spec.segment_count, 1, seed=0)
        config = AptsConfig(tr=TR, subdomain_count=1, local_iters=1, fdl=False)
        state = TR.initial_state()
        stepped, new_state, record = apts_step(params, batch, partition, state, config)

        # Reference: one full TR step (local pass over all coordinates with
        # the same radius) followed by one global TR step.
        mask = full_mask(spec)
        objective = MaskedObjective(params, batch, mask)
        local_cfg = TrConfig(
            delta_init=TR.delta_init, delta_min=0.0, delta_max=TR.delta_init, order=1
        )
        local = tr_step(
            params.values, objective, TrState(delta=TR.delta_init), local_cfg
        )
        ref_half = local.params
        global_result = tr_step(ref_half, objective, TrState(delta=TR.delta_init), TR)
        assert np.allclose(stepped.values, global_result.params, atol=0, rtol=0)
        assert record.global_accepted == global_result.accepted

    def test_precondition_bound_recorded(self):
        spec, params, batch = toy_setup(seed=8)
        partition = make_partition(spec.segment_count, 2, seed=3)
        config = AptsConfig(tr=TR, subdomain_count=2, local_iters=5, fdl=True)
        state = TR.initial_state()
        for _ in range(5):
            params, state, record = apts_step(params, batch, partition, state, config)
            assert record.precond_norm_inf <= record.delta_before + 1e-12
            assert TR.delta_min <= state.delta <= TR.delta_max


class TestRunApts:
    def test_zero_epochs_initial_evaluation_only(self):
        train = make_synthetic("two_gaussians", 40, seed=0)
        spec = MlpSpec((2, 3, 2), seed=0)
        config = AptsConfig(tr=TR, subdomain_count=2)
        run = run_apts(train, spec, config, epochs=0, test=train)
        assert len(run.epochs) == 1
        assert run.epochs[0].epoch == 0
        assert run.steps == []

    def test_sapts_steps_once_per_batch(self):
        train = make_synthetic("two_gaussians", 200, seed=1)
        spec = MlpSpec((2, 3, 2), seed=1)
        plan = make_batches(train, 20, 0.01, seed=2)
        config = AptsConfig(tr=TR, subdomain_count=2)
        run = run_apts(train, spec, config, epochs=2, plan=plan)
        assert len(run.steps) == 40  # 20 batches x 2 epochs

    def test_full_batch_equals_single_batch_plan(self):
        train = make_synthetic("two_gaussians", 60, seed=2)
        spec = MlpSpec((2, 3, 2), seed=2)
        config = AptsConfig(tr=TR, subdomain_count=2, partition_seed=5)
        plan = make_batches(train, 1, 0.0, seed=config.partition_seed)
        full = run_apts(train, spec, config, epochs=3)
        planned = run_apts(train, spec, config, epochs=3, plan=plan)
        for a, b in zip(full.epochs, planned.epochs):
            assert a.train_loss == b.train_loss
        assert np.array_equal(full.params.values, planned.params.values)

    def test_serial_and_concurrent_identical(self):
        train = make_synthetic("spiral", 80, seed=3)
        spec = MlpSpec((2, 4, 2), seed=3)
        serial = AptsConfig(tr=TR, subdomain_count=4, workers=0, partition_seed=1)
        threaded = AptsConfig(tr=TR, subdomain_count=4, workers=4, partition_seed=1)
        a = run_apts(train, spec, serial, epochs=3)
        b = run_apts(train, spec, threaded, epochs=3)
        assert np.array_equal(a.params.values, b.params.values)
        for ra, rb in zip(a.epochs, b.epochs):
            assert ra.train_loss == rb.train_loss

    def test_fdl_invariant_loss_half_bounded_when_w_below_one(self):
        train = make_synthetic("spiral", 100, seed=4)
        spec = MlpSpec((2, 4, 2), seed=4)
        config = AptsConfig(tr=TR, subdomain_count=2, fdl=True)
        run = run_apts(train, spec, config, epochs=10)
        assert run.steps
        for record in run.steps:
            assert record.fdl.activations <= 5
            if record.fdl.final_w < 1.0:
                assert record.loss_half <= record.loss_before
