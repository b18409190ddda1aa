"""
Independent verifiers: finite differences, dense matrix exponentials and exhaustive
enumeration. They rely only on the spin-dynamics primitives and are meant for tiny
instances; none of the optimizers call them.

exhaustive_quantizer only enumerates partitions of the circularly sorted phases into
contiguous arcs: optimal cells of a one-dimensional (circular) quantizer are intervals.
"""
import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from core.errors import InvalidInputError, OracleRefusalError
from core.pulses import TWO_PI, DiscretePulse, PhasePulse, wrap_phase
from core.spin_dynamics import (
    EnsembleSpec,
    cross_generator,
    ensemble_fidelity,
    field_components,
    figure_of_merit,
    rotation_matrices,
)
from utils.logger import logger

MAX_MAPPINGS = 10 ** 6
MAX_QUANTIZER_PHASES = 12
MAX_QUANTIZER_LEVELS = 4


@dataclass(frozen=True)
class OracleReport:
    oracle: str
    instance: str
    oracle_value: float
    candidate_value: float
    deviation: float
    tolerance: float

    def __post_init__(self):
        if self.deviation < 0:
            raise InvalidInputError("deviation must be >= 0")

    @property
    def passed(self) -> bool:
        return self.deviation <= self.tolerance


def fd_gradient(spec: EnsembleSpec, pulse: PhasePulse, h: float = 1e-6) -> np.ndarray:
    """Central differences (Phi(theta_j + h) - Phi(theta_j - h)) / 2h on exact propagation."""
    if h <= 0:
        raise InvalidInputError(f"finite-difference step must be > 0, got {h}")
    theta = np.array(pulse.theta if isinstance(pulse, PhasePulse) else pulse, dtype=float)
    gradient = np.zeros(theta.size)
    for j in range(theta.size):
        plus = theta.copy()
        minus = theta.copy()
        plus[j] += h
        minus[j] -= h
        gradient[j] = (figure_of_merit(spec, plus) - figure_of_merit(spec, minus)) / (2.0 * h)
    return gradient


def fd_value_gradient(spec: EnsembleSpec, dp: DiscretePulse, h: float = 1e-6) -> np.ndarray:
    """Central differences in the codebook coordinates v_m."""
    if h <= 0:
        raise InvalidInputError(f"finite-difference step must be > 0, got {h}")
    values = np.array(dp.values, dtype=float)
    gradient = np.zeros(values.size)
    for m in range(values.size):
        plus = values.copy()
        minus = values.copy()
        plus[m] += h
        minus[m] -= h
        gradient[m] = (figure_of_merit(spec, plus[dp.mapping]) - figure_of_merit(spec, minus[dp.mapping])) / (2.0 * h)
    return gradient


def dense_exponential_finals(spec: EnsembleSpec, pulse: PhasePulse) -> np.ndarray:
    """Final states with every slice propagated by scipy's expm of dt * [Omega]x."""
    theta = pulse.theta if isinstance(pulse, PhasePulse) else np.asarray(pulse, dtype=float)
    generators = cross_generator(field_components(theta, spec.offsets, spec.omega0)) * spec.dt
    finals = spec.initial_states()
    for k in range(spec.n_off):
        state = finals[k]
        for s in range(theta.size):
            state = expm(generators[s, k]) @ state
        finals[k] = state
    return finals


def substep_finals(spec: EnsembleSpec, pulse: PhasePulse, substeps: int = 100) -> np.ndarray:
    """Final states with every slice cut into `substeps` equal rotations."""
    theta = pulse.theta if isinstance(pulse, PhasePulse) else np.asarray(pulse, dtype=float)
    rotations = rotation_matrices(field_components(theta, spec.offsets, spec.omega0), spec.dt / substeps)
    state = spec.initial_states()
    for s in range(theta.size):
        for _ in range(substeps):
            state = np.einsum("kij,kj->ki", rotations[s], state)
    return state


def brute_force_mapping(spec: EnsembleSpec, values: Sequence[float], n_steps: Optional[int] = None,
                        m: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """
    Global optimum over all M^N mappings by depth-first enumeration sharing prefixes.
    Ties resolve to the lexicographically smallest mapping.
    """
    values = wrap_phase(np.atleast_1d(values))
    n_steps = spec.n_steps if n_steps is None else n_steps
    m = values.size if m is None else m
    if n_steps != spec.n_steps or m != values.size:
        raise InvalidInputError("n_steps/M disagree with the ensemble or the codebook")
    if float(m) ** n_steps > MAX_MAPPINGS:
        logger.error(f"brute_force_mapping refused M^N = {m}^{n_steps}")
        raise OracleRefusalError(f"M^N = {m}^{n_steps} exceeds {MAX_MAPPINGS} mappings")

    rotations = rotation_matrices(field_components(values, spec.offsets, spec.omega0), spec.dt)
    best_mapping = np.zeros(n_steps, dtype=np.int64)
    best_phi = -np.inf
    prefix = np.zeros(n_steps, dtype=np.int64)

    def descend(depth: int, state: np.ndarray):
        nonlocal best_phi, best_mapping
        if depth == n_steps:
            phi = ensemble_fidelity(state, spec.target)
            if phi > best_phi:
                best_phi = phi
                best_mapping = prefix.copy()
            return
        for k in range(m):
            prefix[depth] = k
            descend(depth + 1, np.einsum("kij,kj->ki", rotations[k], state))

    descend(0, spec.initial_states())
    return best_mapping, float(best_phi)


def _arc_mean(sorted_phases: np.ndarray, start: int, length: int) -> float:
    n = sorted_phases.size
    positions = np.arange(start, start + length)
    members = sorted_phases[positions % n] + TWO_PI * (positions >= n)
    return float(np.mod(np.mean(members), TWO_PI))


def _nearest_distance_sum(phases: np.ndarray, centroids: np.ndarray) -> float:
    gap = np.mod(np.abs(phases[:, None] - centroids[None, :]), TWO_PI)
    return float(np.sum(np.min(np.minimum(gap, TWO_PI - gap), axis=1)))


def exhaustive_quantizer(phases: Sequence[float], m: int) -> Tuple[np.ndarray, float]:
    """Minimum distortion over all splits of the sorted circle into M contiguous arcs."""
    u = np.sort(wrap_phase(np.atleast_1d(phases)))
    n = u.size
    if m < 1 or n < 1:
        raise InvalidInputError("exhaustive_quantizer needs M >= 1 and at least one phase")
    if n > MAX_QUANTIZER_PHASES or m > MAX_QUANTIZER_LEVELS:
        logger.error(f"exhaustive_quantizer refused N={n}, M={m}")
        raise OracleRefusalError(
            f"exhaustive quantizer limited to N <= {MAX_QUANTIZER_PHASES}, M <= {MAX_QUANTIZER_LEVELS}"
        )
    if m >= n:
        return u.copy(), 0.0

    best_centroids = None
    best_j = np.inf
    for starts in itertools.combinations(range(n), m):
        lengths = np.diff(np.append(starts, starts[0] + n))
        centroids = np.sort([_arc_mean(u, s, int(l)) for s, l in zip(starts, lengths)])
        total = _nearest_distance_sum(u, centroids)
        if total < best_j:
            best_j, best_centroids = total, centroids
    return best_centroids, best_j


def _random_instance(n_off: int, n_steps: int) -> EnsembleSpec:
    omega_max = TWO_PI * 1e4
    return EnsembleSpec.symmetric(omega_max, n_off, TWO_PI * 1e4, n_steps * 0.5e-6, n_steps)


def run_oracle_suite(n_instances: int = 20, seed: int = 1234, fd_step: float = 1e-6) -> List[OracleReport]:
    """Every oracle on small random instances; used by the oracle-check command."""
    # Local imports keep the verified modules out of the oracle primitives above
    from core.discrete_grape import mapping_sweep
    from core.grape_engine import phase_gradient
    from core.lloyd_quantizer import run_lloyd

    rng = np.random.default_rng(seed)
    reports: List[OracleReport] = []
    for index in range(n_instances):
        n_off = int(rng.integers(1, 6))
        n_steps = int(rng.integers(2, 17))
        spec = _random_instance(n_off, n_steps)
        pulse = PhasePulse(rng.uniform(0.0, TWO_PI, n_steps))
        label = f"#{index} n_off={n_off} N={n_steps}"

        analytic = phase_gradient(spec, pulse)
        numeric = fd_gradient(spec, pulse, fd_step)
        deviation = float(np.linalg.norm(analytic - numeric))
        reports.append(OracleReport("fd_gradient", label, float(np.linalg.norm(numeric)),
                                    float(np.linalg.norm(analytic)), deviation,
                                    0.07 * float(np.linalg.norm(numeric)) + 1e-9))

        exact = dense_exponential_finals(spec, pulse)
        reference = ensemble_fidelity(exact, spec.target)
        candidate = figure_of_merit(spec, pulse)
        reports.append(OracleReport("dense_expm", label, reference, candidate, abs(reference - candidate), 1e-10))

        tiny_steps = int(rng.integers(2, 7))
        tiny_m = int(rng.integers(2, 4))
        tiny = _random_instance(int(rng.integers(1, 3)), tiny_steps)
        values = rng.uniform(0.0, TWO_PI, tiny_m)
        start = DiscretePulse(values, rng.integers(0, tiny_m, tiny_steps))
        _, optimum = brute_force_mapping(tiny, values)
        swept = mapping_sweep(tiny, start).phi
        reports.append(OracleReport("brute_force_mapping", f"#{index} N={tiny_steps} M={tiny_m}",
                                    optimum, swept, max(0.0, swept - optimum), 1e-12))

        phases = rng.uniform(0.0, TWO_PI, int(rng.integers(5, MAX_QUANTIZER_PHASES + 1)))
        levels = int(rng.integers(2, MAX_QUANTIZER_LEVELS + 1))
        lloyd = run_lloyd(phases, levels)
        if lloyd.codebook.empty_bins:
            # a kept centroid is not an arc mean, so the enumeration does not cover it
            logger.debug(f"Skipping quantizer comparison #{index}: empty bins {lloyd.codebook.empty_bins}")
            continue
        _, minimum = exhaustive_quantizer(phases, levels)
        reports.append(OracleReport("exhaustive_quantizer", f"#{index} N={phases.size} M={levels}",
                                    minimum, lloyd.codebook.distortion,
                                    max(0.0, minimum - lloyd.codebook.distortion), 1e-12))
    return reports
