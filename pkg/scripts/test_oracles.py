import sys

import numpy as np
import pytest

from core.discrete_grape import init_random, mapping_sweep
from core.errors import InvalidInputError, OracleRefusalError
from core.lloyd_quantizer import run_lloyd
from core.oracles import (
    MAX_MAPPINGS,
    OracleReport,
    brute_force_mapping,
    exhaustive_quantizer,
    fd_gradient,
    run_oracle_suite,
)
from core.pulses import TWO_PI, PhasePulse
from core.spin_dynamics import EnsembleSpec


def quarter_turn_spec() -> EnsembleSpec:
    """Single resonant spin, two slices of a quarter turn each."""
    omega0 = TWO_PI * 1e4
    return EnsembleSpec(np.zeros(1), omega0, np.pi / omega0, 2)


class TestFdGradient:
    def test_zero_length_pulse(self):
        spec = EnsembleSpec(np.zeros(1), TWO_PI * 1e4, 0.0, 0)
        assert fd_gradient(spec, PhasePulse(np.zeros(0))).shape == (0,)

    @pytest.mark.parametrize("h", [0.0, -1e-6])
    def test_non_positive_step_rejected(self, tiny_spec, random_pulse, h):
        with pytest.raises(InvalidInputError):
            fd_gradient(tiny_spec, random_pulse, h)

    def test_deterministic(self, tiny_spec, random_pulse):
        np.testing.assert_array_equal(fd_gradient(tiny_spec, random_pulse), fd_gradient(tiny_spec, random_pulse))


class TestBruteForceMapping:
    def test_single_value_codebook(self, tiny_spec):
        mapping, _ = brute_force_mapping(tiny_spec, [0.4])
        np.testing.assert_array_equal(mapping, np.zeros(tiny_spec.n_steps))

    def test_two_quarter_turns_can_invert(self):
        mapping, phi = brute_force_mapping(quarter_turn_spec(), [0.0, np.pi], n_steps=2, m=2)
        assert phi == pytest.approx(1.0, abs=1e-12)
        # same-axis quarter turns compose to a half turn; mixed axes cancel
        assert mapping.tolist() in ([0, 0], [1, 1])

    def test_dominates_mapping_sweep(self):
        spec = EnsembleSpec.symmetric(TWO_PI * 1e4, 2, TWO_PI * 1e4, 6 * 5e-6, 6)
        for seed in range(5):
            dp = init_random(2, spec.n_steps, seed)
            _, optimum = brute_force_mapping(spec, dp.values)
            assert mapping_sweep(spec, dp).phi <= optimum + 1e-12

    def test_refuses_large_instances(self):
        spec = EnsembleSpec(np.zeros(1), TWO_PI * 1e4, 7e-6, 7)
        assert 10 ** 7 > MAX_MAPPINGS
        with pytest.raises(OracleRefusalError):
            brute_force_mapping(spec, np.linspace(0.0, 6.0, 10))

    def test_mismatched_sizes_rejected(self, tiny_spec):
        with pytest.raises(InvalidInputError):
            brute_force_mapping(tiny_spec, [0.0, 1.0], n_steps=tiny_spec.n_steps + 1)


class TestExhaustiveQuantizer:
    def test_two_clusters(self):
        centroids, minimum = exhaustive_quantizer([0.1, 0.2, 2.0, 2.1], 2)
        np.testing.assert_allclose(centroids, [0.15, 2.05], atol=1e-12)
        assert minimum == pytest.approx(0.2, abs=1e-12)

    def test_as_many_levels_as_phases(self, rng):
        phases = rng.uniform(0.0, TWO_PI, 4)
        centroids, minimum = exhaustive_quantizer(phases, 4)
        assert minimum == 0.0
        np.testing.assert_array_equal(centroids, np.sort(phases))

    @pytest.mark.parametrize("n, m", [(13, 2), (8, 5)])
    def test_refuses_large_instances(self, n, m):
        with pytest.raises(OracleRefusalError):
            exhaustive_quantizer(np.linspace(0.0, 6.0, n), m)

    def test_never_worse_than_lloyd(self, rng):
        compared = 0
        for _ in range(30):
            phases = rng.uniform(0.0, TWO_PI, int(rng.integers(5, 13)))
            m = int(rng.integers(2, 5))
            lloyd = run_lloyd(phases, m)
            if lloyd.codebook.empty_bins:
                continue
            _, minimum = exhaustive_quantizer(phases, m)
            assert minimum <= lloyd.codebook.distortion + 1e-12
            compared += 1
        assert compared > 0


def test_report_deviation_must_be_non_negative():
    with pytest.raises(InvalidInputError):
        OracleReport("fd_gradient", "case", 1.0, 1.0, -1e-3, 1e-6)
    assert OracleReport("dense_expm", "case", 1.0, 1.0, 0.0, 1e-10).passed
    assert not OracleReport("dense_expm", "case", 1.0, 0.5, 0.5, 1e-10).passed


def test_oracle_suite_passes():
    reports = run_oracle_suite(n_instances=20, seed=99)
    names = {report.oracle for report in reports}
    assert {"fd_gradient", "dense_expm", "brute_force_mapping"} <= names
    failed = [f"{r.oracle} {r.instance}: {r.deviation:.3e} > {r.tolerance:.3e}" for r in reports if not r.passed]
    assert not failed, "\n".join(failed)


def test_oracle_suite_is_deterministic():
    first = [(r.oracle, r.instance, r.deviation) for r in run_oracle_suite(n_instances=3, seed=5)]
    again = [(r.oracle, r.instance, r.deviation) for r in run_oracle_suite(n_instances=3, seed=5)]
    assert first == again


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
