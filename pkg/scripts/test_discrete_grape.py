import itertools
import sys
import time

import numpy as np
import pytest

from core.discrete_grape import (
    FORWARD_REFERENCES,
    DiscreteGrapeEngine,
    DiscreteGrapeOptions,
    discrete_phi,
    init_random,
    init_uniform_forward,
    initial_discrete_pulse,
    mapping_sweep,
    optimize_discrete,
    uniform_codebook,
    update_values,
    value_gradient,
)
from core.errors import InvalidInputError
from core.grape_engine import GrapeOptions, line_search, optimize_continuous, phase_gradient
from core.oracles import brute_force_mapping, fd_value_gradient
from core.pulses import TWO_PI, DiscretePulse, PhasePulse, materialize
from core.spin_dynamics import EnsembleSpec, adjoint_propagate, figure_of_merit

BENCHMARK_SPEC = dict(omega_max=TWO_PI * 1e4, n_off=200, omega0=TWO_PI * 1e4, tf=1.8e-4, n_steps=360)


def sweep_to_fixed_point(spec, dp, limit=100):
    for _ in range(limit):
        sweep = mapping_sweep(spec, dp)
        if sweep.changed == 0:
            return sweep
        dp = sweep.pulse
    raise AssertionError("mapping sweep did not settle")


class TestMaterialize:
    def test_picks_codebook_entries(self):
        dp = DiscretePulse([0.1, 0.2, 0.3], [2, 0, 0, 1])
        np.testing.assert_array_equal(materialize(dp).theta, [0.3, 0.1, 0.1, 0.2])

    def test_one_based_constructor(self):
        dp = DiscretePulse.from_one_based([0.1, 0.2], [1, 2, 2])
        np.testing.assert_array_equal(dp.mapping, [0, 1, 1])

    def test_relabelling_codebook_leaves_phi_unchanged(self, tiny_spec, rng):
        dp = init_random(4, tiny_spec.n_steps, 5)
        permutation = rng.permutation(4)
        inverse = np.argsort(permutation)
        relabelled = DiscretePulse(dp.values[permutation], inverse[dp.mapping])
        np.testing.assert_array_equal(materialize(relabelled).theta, materialize(dp).theta)
        assert discrete_phi(tiny_spec, relabelled) == discrete_phi(tiny_spec, dp)

    def test_out_of_range_mapping_rejected(self):
        with pytest.raises(InvalidInputError):
            DiscretePulse([0.1, 0.2], [0, 2])

    def test_non_integer_mapping_rejected(self):
        with pytest.raises(InvalidInputError):
            DiscretePulse([0.1, 0.2], [0.0, 0.5])

    def test_usage_counts_slices(self):
        assert DiscretePulse([0.1, 0.2, 0.3], [2, 0, 0, 2, 2]).usage().tolist() == [2, 0, 3]


class TestValueGradient:
    def test_identity_mapping_matches_phase_gradient(self, tiny_spec, random_pulse):
        dp = DiscretePulse(random_pulse.theta, np.arange(tiny_spec.n_steps))
        np.testing.assert_array_equal(value_gradient(tiny_spec, dp), phase_gradient(tiny_spec, random_pulse))

    def test_unused_entry_has_exactly_zero_gradient(self, tiny_spec):
        dp = DiscretePulse([0.3, 2.0, 4.0], np.arange(tiny_spec.n_steps) % 2)
        gradient = value_gradient(tiny_spec, dp)
        assert gradient[2] == 0.0
        assert np.all(gradient[:2] != 0.0)

    def test_sums_slice_gradients(self, tiny_spec):
        dp = init_random(3, tiny_spec.n_steps, 9)
        slice_gradient = phase_gradient(tiny_spec, materialize(dp))
        expected = [slice_gradient[dp.mapping == m].sum() for m in range(3)]
        np.testing.assert_allclose(value_gradient(tiny_spec, dp), expected, rtol=1e-12, atol=1e-15)

    def test_agrees_with_finite_differences(self):
        spec = EnsembleSpec.symmetric(TWO_PI * 1e4, 5, TWO_PI * 1e4, 8 * 0.5e-6, 8)
        dp = init_random(3, spec.n_steps, 21)
        numeric = fd_value_gradient(spec, dp, 1e-6)
        assert np.linalg.norm(value_gradient(spec, dp) - numeric) <= 0.07 * np.linalg.norm(numeric)

    def test_random_instances_within_budget_and_uphill(self):
        rng = np.random.default_rng(99)
        for index in range(20):
            n_steps = int(rng.integers(2, 17))
            m = int(rng.integers(1, 5))
            spec = EnsembleSpec.symmetric(TWO_PI * 1e4, int(rng.integers(1, 6)), TWO_PI * 1e4,
                                          n_steps * 0.5e-6, n_steps)
            dp = DiscretePulse(rng.uniform(0.0, TWO_PI, m), rng.integers(0, m, n_steps))
            analytic = value_gradient(spec, dp)
            numeric = fd_value_gradient(spec, dp, 1e-6)
            assert np.linalg.norm(analytic - numeric) <= 0.07 * np.linalg.norm(numeric) + 1e-9, f"instance {index}"
            if np.linalg.norm(numeric) > 1e-8:
                assert float(analytic @ numeric) > 0.0, f"instance {index}: gradient points downhill"

    def test_length_mismatch_rejected(self, tiny_spec):
        with pytest.raises(InvalidInputError):
            value_gradient(tiny_spec, init_random(2, tiny_spec.n_steps + 2, 0))


class TestUpdateValues:
    def test_identity_mapping_reproduces_line_search(self, tiny_spec, random_pulse):
        options = GrapeOptions()
        dp = DiscretePulse(random_pulse.theta, np.arange(tiny_spec.n_steps))
        update = update_values(tiny_spec, dp, options)
        reference = line_search(tiny_spec, random_pulse, phase_gradient(tiny_spec, random_pulse), options)
        assert update.stalled == reference.stalled
        np.testing.assert_array_equal(update.pulse.values, reference.point)
        assert update.phi == reference.phi

    def test_never_decreases_phi(self, tiny_spec):
        options = GrapeOptions()
        for seed in range(20):
            dp = init_random(3, tiny_spec.n_steps, seed)
            phi0 = discrete_phi(tiny_spec, dp)
            update = update_values(tiny_spec, dp, options, phi0)
            assert update.phi >= phi0
            np.testing.assert_array_equal(update.pulse.mapping, dp.mapping)


class TestMappingSweep:
    def test_single_value_codebook_is_unchanged(self, tiny_spec):
        dp = DiscretePulse([1.0], np.zeros(tiny_spec.n_steps, dtype=int))
        sweep = mapping_sweep(tiny_spec, dp)
        assert sweep.changed == 0
        assert sweep.pulse is dp
        assert sweep.phi == pytest.approx(discrete_phi(tiny_spec, dp), abs=1e-12)

    def test_never_decreases_phi(self, tiny_spec):
        for seed in range(20):
            dp = init_random(4, tiny_spec.n_steps, seed)
            sweep = mapping_sweep(tiny_spec, dp)
            assert sweep.phi >= discrete_phi(tiny_spec, dp) - 1e-12
            assert abs(sweep.phi - discrete_phi(tiny_spec, sweep.pulse)) <= 1e-12
            assert sweep.changed == int(np.sum(sweep.pulse.mapping != dp.mapping))

    def test_settled_mapping_is_one_opt(self, tiny_spec):
        dp = init_random(3, tiny_spec.n_steps, 17)
        settled = sweep_to_fixed_point(tiny_spec, dp)
        phi = discrete_phi(tiny_spec, settled.pulse)
        for j in range(tiny_spec.n_steps):
            for m in range(settled.pulse.m):
                mapping = settled.pulse.mapping.copy()
                mapping[j] = m
                assert discrete_phi(tiny_spec, settled.pulse.with_mapping(mapping)) <= phi + 1e-12

    def test_never_beats_exhaustive_search(self):
        spec = EnsembleSpec.symmetric(TWO_PI * 1e4, 3, TWO_PI * 1e4, 5 * 5e-6, 5)
        for seed in range(5):
            dp = init_random(3, spec.n_steps, seed)
            mapping, optimum = brute_force_mapping(spec, dp.values)
            assert mapping_sweep(spec, dp).phi <= optimum + 1e-12
            assert abs(discrete_phi(spec, dp.with_mapping(mapping)) - optimum) <= 1e-12

    def test_every_start_settles_below_global_optimum(self):
        rng = np.random.default_rng(7)
        for n_off, n_steps, m in itertools.product((1, 2), range(1, 7), range(1, 4)):
            spec = EnsembleSpec.symmetric(TWO_PI * 1e4, n_off, TWO_PI * 1e4, n_steps * 5e-6, n_steps)
            values = rng.uniform(0.0, TWO_PI, m)
            _, optimum = brute_force_mapping(spec, values)
            one_opt = set()
            for start in itertools.product(range(m), repeat=n_steps):
                dp = DiscretePulse(values, np.array(start))
                settled = sweep_to_fixed_point(spec, dp)
                label = f"n_off={n_off} N={n_steps} M={m} start={start}"
                assert settled.phi >= discrete_phi(spec, dp) - 1e-12, label
                assert settled.phi <= optimum + 1e-12, label

                mapping = tuple(int(k) for k in settled.pulse.mapping)
                if mapping in one_opt:
                    continue
                for j, k in itertools.product(range(n_steps), range(m)):
                    neighbour = list(mapping)
                    neighbour[j] = k
                    assert discrete_phi(spec, dp.with_mapping(neighbour)) <= settled.phi + 1e-12, label
                one_opt.add(mapping)

    def test_precomputed_adjoint_gives_same_sweep(self, tiny_spec):
        dp = init_random(3, tiny_spec.n_steps, 4)
        given = mapping_sweep(tiny_spec, dp, adjoint_propagate(tiny_spec, materialize(dp)))
        computed = mapping_sweep(tiny_spec, dp)
        np.testing.assert_array_equal(given.pulse.mapping, computed.pulse.mapping)
        assert given.phi == computed.phi

    def test_empty_pulse(self):
        spec = EnsembleSpec(np.zeros(2), TWO_PI * 1e4, 0.0, 0)
        sweep = mapping_sweep(spec, DiscretePulse([0.5], np.zeros(0, dtype=int)))
        assert sweep.changed == 0
        assert sweep.phi == -1.0


class TestOptimizeDiscrete:
    def test_identity_mapping_without_sweep_is_continuous_grape(self, small_spec):
        theta = PhasePulse.random(small_spec.n_steps, 8).theta
        continuous = optimize_continuous(small_spec, PhasePulse(theta), GrapeOptions(max_iters=25))
        discrete = optimize_discrete(
            small_spec,
            DiscretePulse(theta, np.arange(small_spec.n_steps)),
            DiscreteGrapeOptions(max_iters=25, sweep_enabled=False),
        )
        assert discrete.phi_history == continuous.phi_history
        assert discrete.reason == continuous.reason
        np.testing.assert_array_equal(discrete.final_pulse.theta, continuous.final_pulse.theta)
        assert discrete.extra["remapped_slices"] == 0

    def test_history_never_decreases(self, small_spec):
        trace = optimize_discrete(small_spec, init_random(4, small_spec.n_steps, 2),
                                  DiscreteGrapeOptions(max_iters=30))
        assert np.all(np.diff(trace.phi_history) >= 0.0)
        assert trace.final_phi > trace.initial_phi
        assert abs(trace.final_phi - discrete_phi(small_spec, trace.discrete_pulse)) <= 1e-12
        np.testing.assert_array_equal(trace.final_pulse.theta, materialize(trace.discrete_pulse).theta)

    def test_codebook_size_is_preserved(self, small_spec):
        trace = optimize_discrete(small_spec, init_random(3, small_spec.n_steps, 6),
                                  DiscreteGrapeOptions(max_iters=10))
        assert trace.discrete_pulse.m == 3
        assert len(np.unique(trace.final_pulse.theta)) <= 3

    def test_length_mismatch_rejected(self, small_spec):
        with pytest.raises(InvalidInputError):
            optimize_discrete(small_spec, init_random(3, 5, 0), DiscreteGrapeOptions())

    def test_reports_propagations(self, small_spec):
        trace = optimize_discrete(small_spec, init_random(4, small_spec.n_steps, 2),
                                  DiscreteGrapeOptions(max_iters=5))
        assert trace.extra["evaluations"] > trace.iterations


class TestSingleLevelCodebook:
    def test_value_gradient_vanishes(self, small_spec):
        for seed in range(5):
            dp = init_random(1, small_spec.n_steps, seed)
            assert abs(value_gradient(small_spec, dp)[0]) <= 1e-12

    def test_matches_constant_phase_pulse(self, small_spec):
        constant = figure_of_merit(small_spec, PhasePulse.constant(small_spec.n_steps))
        for value in (0.0, 1.3, 5.9):
            assert abs(figure_of_merit(small_spec, PhasePulse.constant(small_spec.n_steps, value)) - constant) <= 1e-12

        trace = optimize_discrete(small_spec, init_random(1, small_spec.n_steps, 3), DiscreteGrapeOptions())
        assert trace.discrete_pulse.m == 1
        assert np.all(trace.discrete_pulse.mapping == 0)
        assert abs(trace.final_phi - constant) <= 1e-12


class TestInitialization:
    def test_random_init_is_deterministic_in_seed(self):
        first, again, other = init_random(4, 12, 7), init_random(4, 12, 7), init_random(4, 12, 8)
        np.testing.assert_array_equal(first.values, again.values)
        np.testing.assert_array_equal(first.mapping, again.mapping)
        assert not np.array_equal(first.values, other.values)

    def test_uniform_codebook_values(self):
        np.testing.assert_allclose(uniform_codebook(4), [0.0, np.pi / 2, np.pi, 3 * np.pi / 2])

    def test_uniform_forward_keeps_uniform_values(self, tiny_spec):
        dp = init_uniform_forward(tiny_spec, 4)
        np.testing.assert_array_equal(dp.values, uniform_codebook(4))
        assert dp.n_steps == tiny_spec.n_steps

    @pytest.mark.parametrize("reference", ["best", "zero_field"])
    def test_uniform_forward_improves_on_zero_phase(self, small_spec, reference):
        dp = init_uniform_forward(small_spec, 8, reference)
        assert discrete_phi(small_spec, dp) >= figure_of_merit(small_spec, np.zeros(small_spec.n_steps)) - 1e-12

    def test_best_reference_keeps_the_better_mapping(self, small_spec):
        for m in (2, 4, 8):
            phis = {reference: discrete_phi(small_spec, init_uniform_forward(small_spec, m, reference))
                    for reference in FORWARD_REFERENCES}
            assert phis["best"] >= max(phis["target"], phis["zero_field"]) - 1e-12

    def test_zero_field_reference_is_one_sweep_from_zero_mapping(self, small_spec):
        start = DiscretePulse(uniform_codebook(4), np.zeros(small_spec.n_steps, dtype=int))
        np.testing.assert_array_equal(init_uniform_forward(small_spec, 4, "zero_field").mapping,
                                      mapping_sweep(small_spec, start).pulse.mapping)

    def test_target_reference_is_greedy_on_every_prefix(self, small_spec):
        dp = init_uniform_forward(small_spec, 4, "target")
        for length in range(1, small_spec.n_steps + 1):
            prefix = EnsembleSpec(small_spec.offsets, small_spec.omega0, length * small_spec.dt, length)
            chosen = figure_of_merit(prefix, dp.values[dp.mapping[:length]])
            for k in range(dp.m):
                mapping = dp.mapping[:length].copy()
                mapping[-1] = k
                assert figure_of_merit(prefix, dp.values[mapping]) <= chosen + 1e-12

    def test_unknown_reference_rejected(self, small_spec):
        with pytest.raises(InvalidInputError):
            init_uniform_forward(small_spec, 4, "adjoint")
        with pytest.raises(InvalidInputError):
            DiscreteGrapeOptions(forward_reference="adjoint")

    def test_engine_uses_configured_reference(self, small_spec):
        engine = DiscreteGrapeEngine({"forward_reference": "target"})
        np.testing.assert_array_equal(engine.initial_pulse(small_spec, 4, "uniform_forward").mapping,
                                      init_uniform_forward(small_spec, 4, "target").mapping)

    @pytest.mark.parametrize("m", [0, -2])
    def test_invalid_codebook_size_rejected(self, tiny_spec, m):
        with pytest.raises(InvalidInputError):
            initial_discrete_pulse(tiny_spec, m, "random")
        with pytest.raises(InvalidInputError):
            initial_discrete_pulse(tiny_spec, m, "uniform_forward")

    def test_unknown_strategy_rejected(self, tiny_spec):
        with pytest.raises(InvalidInputError):
            initial_discrete_pulse(tiny_spec, 4, "from_lloyd")


def test_engine_records_runs(small_spec):
    engine = DiscreteGrapeEngine({"max_iters": 5})
    trace = engine.optimize(small_spec, engine.initial_pulse(small_spec, 4, "random", seed=1))
    status = engine.get_status()
    assert status["total_runs"] == 1
    assert status["total_iterations"] == trace.iterations
    assert status["best_phi"] == trace.final_phi
    assert status["options"].sweep_enabled


@pytest.mark.benchmark
def test_benchmark_uniform_forward_m8():
    spec = EnsembleSpec.symmetric(**BENCHMARK_SPEC)
    clock = time.perf_counter()
    start = init_uniform_forward(spec, 8)
    assert discrete_phi(spec, start) > 0.0
    trace = optimize_discrete(spec, start, DiscreteGrapeOptions())
    elapsed = time.perf_counter() - clock
    assert trace.final_phi > 0.99
    assert elapsed <= 300.0, f"uniform-forward M=8 run took {elapsed:.1f} s"


@pytest.mark.benchmark
def test_benchmark_random_m4_multistart():
    spec = EnsembleSpec.symmetric(**BENCHMARK_SPEC)
    best = max(optimize_discrete(spec, init_random(4, spec.n_steps, seed), DiscreteGrapeOptions()).final_phi
               for seed in range(100))
    assert 0.985 <= best <= 1.0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
