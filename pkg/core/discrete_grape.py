"""
Discrete-pulse GRAPE. Each iteration runs two sub-steps:

  1. codebook update: gradient ascent on the M values with the mapping fixed,
     dPhi/dv_m being the sum of the slice gradients of every slice mapped to v_m;
  2. mapping sweep: slices visited in increasing time order, each given the codebook
     value that maximizes the full-pulse Phi with every other slice fixed.

Both sub-steps never decrease Phi.
"""
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from core.errors import InvalidInputError
from core.grape_engine import (
    AscentStepper,
    GrapeOptions,
    OptimizeTrace,
    TrialPropagator,
    backtracking_ascent,
    gradient_from_record,
    phase_gradient,
)
from core.pulses import TWO_PI, DiscretePulse, materialize
from core.spin_dynamics import (
    EnsembleSpec,
    adjoint_propagate,
    ensemble_fidelity,
    field_components,
    figure_of_merit,
    rotation_matrices,
)
from utils.logger import logger

__all__ = [
    "DiscreteGrapeOptions",
    "DiscreteGrapeEngine",
    "DiscretePulse",
    "FORWARD_REFERENCES",
    "ValueUpdate",
    "SweepResult",
    "materialize",
    "discrete_phi",
    "value_gradient",
    "update_values",
    "mapping_sweep",
    "optimize_discrete",
    "init_random",
    "uniform_codebook",
    "init_uniform_forward",
    "initial_discrete_pulse",
]

# What the forward pass of the uniform initialization scores each slice against
FORWARD_REFERENCES = ("best", "target", "zero_field")


@dataclass(frozen=True)
class DiscreteGrapeOptions(GrapeOptions):
    max_iters: int = 2000
    sweep_enabled: bool = True
    forward_reference: str = "best"

    def __post_init__(self):
        super().__post_init__()
        if self.forward_reference not in FORWARD_REFERENCES:
            raise InvalidInputError(
                f"forward_reference must be one of {FORWARD_REFERENCES}, got '{self.forward_reference}'"
            )


@dataclass(frozen=True, eq=False)
class ValueUpdate:
    pulse: DiscretePulse
    phi: float
    step: float
    stalled: bool


@dataclass(frozen=True, eq=False)
class SweepResult:
    pulse: DiscretePulse
    phi: float
    changed: int


def _check_length(spec: EnsembleSpec, dp: DiscretePulse):
    if dp.n_steps != spec.n_steps:
        logger.error(f"Mapping of length {dp.n_steps} does not match N={spec.n_steps}")
        raise InvalidInputError(f"mapping length {dp.n_steps} != n_steps {spec.n_steps}")


def discrete_phi(spec: EnsembleSpec, dp: DiscretePulse) -> float:
    _check_length(spec, dp)
    return figure_of_merit(spec, materialize(dp))


def value_gradient(spec: EnsembleSpec, dp: DiscretePulse, form: str = "exact") -> np.ndarray:
    """Slice gradients summed per codebook entry; entries nobody uses get exactly 0."""
    _check_length(spec, dp)
    slice_gradient = phase_gradient(spec, materialize(dp), form)
    return np.bincount(dp.mapping, weights=slice_gradient, minlength=dp.m)


def update_values(spec: EnsembleSpec, dp: DiscretePulse, options: GrapeOptions,
                  phi0: Optional[float] = None) -> ValueUpdate:
    """One backtracking step from epsilon0 in the M-dimensional value space."""
    gradient = value_gradient(spec, dp, options.gradient_form)
    if phi0 is None:
        phi0 = discrete_phi(spec, dp)
    mapping = dp.mapping
    result = backtracking_ascent(
        lambda values: figure_of_merit(spec, values[mapping]), dp.values, gradient, phi0, options
    )
    if result.stalled:
        return ValueUpdate(dp, phi0, 0.0, True)
    return ValueUpdate(dp.with_values(result.point), result.phi, result.step, False)


def _greedy_sweep(spec: EnsembleSpec, dp: DiscretePulse, adjoint: np.ndarray) -> SweepResult:
    """Time-ordered argmax of lambda[j+1] . (R_j(v_k) M_j) over the codebook, slice by slice."""
    candidates = rotation_matrices(field_components(dp.values, spec.offsets, spec.omega0), spec.dt)
    mapping = dp.mapping.copy()
    state = spec.initial_states()
    changed = 0

    for j in range(spec.n_steps):
        trial = np.einsum("mkab,kb->mka", candidates, state)
        scores = np.einsum("mka,ka->m", trial, adjoint[j + 1]) / spec.n_off
        incumbent = int(mapping[j])
        best = int(np.argmax(scores))
        if scores[incumbent] >= scores[best]:
            best = incumbent
        if best != incumbent:
            mapping[j] = best
            changed += 1
        state = trial[best]

    if changed == 0:
        return SweepResult(dp, ensemble_fidelity(state, spec.target), 0)
    return SweepResult(dp.with_mapping(mapping), ensemble_fidelity(state, spec.target), changed)


def mapping_sweep(spec: EnsembleSpec, dp: DiscretePulse, adjoint: Optional[np.ndarray] = None) -> SweepResult:
    """
    Greedy time-ordered remapping. The adjoint states come from the pre-sweep field:
    adjoint[j+1] depends only on slices after j, which the sweep has not touched yet,
    so every candidate score is the exact Phi of (updated head, candidate, old tail).
    Ties keep the incumbent, otherwise the lowest index wins. Cost O(N * M * n_off).

    `adjoint` may be passed in when the caller already holds the adjoint record of
    materialize(dp).
    """
    _check_length(spec, dp)
    if spec.n_steps == 0:
        return SweepResult(dp, discrete_phi(spec, dp), 0)
    if adjoint is None:
        adjoint = adjoint_propagate(spec, materialize(dp))
    return _greedy_sweep(spec, dp, adjoint)


def optimize_discrete(spec: EnsembleSpec, initial: DiscretePulse, options: DiscreteGrapeOptions) -> OptimizeTrace:
    """
    Alternates the codebook update and mapping_sweep. Stops when both sub-steps stall,
    when the Phi gain stays below tol_delta_phi for `patience` iterations, or at max_iters.

    The codebook update shares the continuous loop's line-search state (carried step,
    conjugate directions); a remap changes the objective, so it clears the direction memory.
    With the identity mapping and no sweep this is exactly optimize_continuous.
    """
    _check_length(spec, initial)
    propagator = TrialPropagator(spec)
    stepper = AscentStepper(options)
    dp = initial
    phi = propagator(materialize(dp).theta)
    history = [phi]
    reason = "max_iters"
    quiet_iterations = 0
    remapped_total = 0

    for iteration in range(1, options.max_iters + 1):
        theta = materialize(dp).theta
        if theta.size:
            slice_gradient = gradient_from_record(spec, theta, propagator.record(theta), options.gradient_form)
        else:
            slice_gradient = np.zeros(0)
        gradient = np.bincount(dp.mapping, weights=slice_gradient, minlength=dp.m)
        mapping = dp.mapping
        update = stepper.step(lambda values: propagator(values[mapping]), dp.values, gradient, phi)
        if update.stalled:
            candidate, candidate_phi = dp, phi
        else:
            candidate, candidate_phi = dp.with_values(update.point), update.phi

        sweep_stalled = True
        if options.sweep_enabled and spec.n_steps:
            candidate_theta = materialize(candidate).theta
            sweep = mapping_sweep(spec, candidate, propagator.record(candidate_theta).adjoint)
            # a remap can only lose Phi through roundoff; keep the pre-sweep mapping then
            if sweep.changed and sweep.phi >= candidate_phi:
                candidate, candidate_phi = sweep.pulse, sweep.phi
                remapped_total += sweep.changed
                sweep_stalled = False
                stepper.reset()

        if update.stalled and sweep_stalled:
            reason = "stalled"
            break

        gain = candidate_phi - phi
        dp, phi = candidate, candidate_phi
        history.append(phi)
        if iteration % options.log_every == 0:
            logger.debug(f"Discrete GRAPE iteration {iteration}: Phi={phi:.10f}, "
                         f"value change={update.change:.3e} rad, remapped so far={remapped_total}")

        quiet_iterations = quiet_iterations + 1 if gain < options.tol_delta_phi else 0
        if quiet_iterations >= options.patience:
            reason = "converged"
            break

    return OptimizeTrace(
        phi_history=history,
        final_pulse=materialize(dp),
        iterations=len(history) - 1,
        reason=reason,
        discrete_pulse=dp,
        extra={"remapped_slices": remapped_total, "evaluations": propagator.evaluations},
    )


def init_random(m: int, n_steps: int, seed: int) -> DiscretePulse:
    """Values uniform on [0, 2pi), mapping uniform on the M entries; deterministic in seed."""
    if m < 1:
        logger.error(f"init_random called with M={m}")
        raise InvalidInputError(f"M must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.0, TWO_PI, m)
    mapping = rng.integers(0, m, n_steps)
    return DiscretePulse(values, mapping)


def uniform_codebook(m: int) -> np.ndarray:
    if m < 1:
        logger.error(f"uniform codebook requested with M={m}")
        raise InvalidInputError(f"M must be >= 1, got {m}")
    return TWO_PI * np.arange(m) / m


def init_uniform_forward(spec: EnsembleSpec, m: int, reference: str = "best") -> DiscretePulse:
    """
    Values 2pi(m-1)/M; the mapping comes from one forward pass from the initial state
    that tests the M values at every slice.

    Args:
        spec: Ensemble the mapping is built for
        m: Codebook size
        reference: What each slice is scored against. "zero_field" uses the adjoint of the
            all-zero-phase field (the exact Phi with a zero-phase tail), "target" the target
            itself (greedy projection onto F after every slice), "best" builds both and keeps
            the mapping with the higher Phi, the zero-field one on a tie.

    Returns:
        DiscretePulse with the uniform codebook and the forward-built mapping
    """
    if reference not in FORWARD_REFERENCES:
        logger.error(f"Unknown forward reference '{reference}'")
        raise InvalidInputError(f"reference must be one of {FORWARD_REFERENCES}, got '{reference}'")
    start = DiscretePulse(uniform_codebook(m), np.zeros(spec.n_steps, dtype=np.int64))
    if spec.n_steps == 0:
        return start

    built = {}
    if reference in ("best", "zero_field"):
        built["zero_field"] = mapping_sweep(spec, start)
    if reference in ("best", "target"):
        target = np.broadcast_to(spec.target_states(), (spec.n_steps + 1, spec.n_off, 3))
        built["target"] = _greedy_sweep(spec, start, target)
    if reference != "best":
        return built[reference].pulse

    chosen = "zero_field" if built["zero_field"].phi >= built["target"].phi else "target"
    logger.debug(f"Uniform forward init (M={m}): zero-field Phi={built['zero_field'].phi:.6f}, "
                 f"target Phi={built['target'].phi:.6f}, keeping {chosen}")
    return built[chosen].pulse


def initial_discrete_pulse(spec: EnsembleSpec, m: int, strategy: str, seed: int = 0,
                           reference: str = "best") -> DiscretePulse:
    """Starting point for the "random" or "uniform_forward" strategy."""
    if strategy == "random":
        return init_random(m, spec.n_steps, seed)
    if strategy == "uniform_forward":
        return init_uniform_forward(spec, m, reference)
    logger.error(f"Unknown discrete initialization '{strategy}'")
    raise InvalidInputError(f"unknown init strategy '{strategy}'")


class DiscreteGrapeEngine:
    """Discrete-pulse GRAPE driven by the `discrete_grape` section of config.yaml."""
    def __init__(self, config: Dict[str, Any]):
        self.config = config
        self.options = DiscreteGrapeOptions.from_config(config)
        self.run_stats = {
            "total_runs": 0,
            "total_iterations": 0,
            "best_phi": None,
        }
        logger.info(f"Discrete GRAPE engine initialized. max_iters={self.options.max_iters}, "
                    f"sweep_enabled={self.options.sweep_enabled}, "
                    f"forward_reference={self.options.forward_reference}")

    def initial_pulse(self, spec: EnsembleSpec, m: int, strategy: str, seed: int = 0) -> DiscretePulse:
        return initial_discrete_pulse(spec, m, strategy, seed, self.options.forward_reference)

    def record(self, iterations: int, final_phi: float):
        """Counts a run, including runs executed in worker processes."""
        self.run_stats["total_runs"] += 1
        self.run_stats["total_iterations"] += iterations
        best = self.run_stats["best_phi"]
        self.run_stats["best_phi"] = final_phi if best is None else max(best, final_phi)

    def optimize(self, spec: EnsembleSpec, initial: DiscretePulse) -> OptimizeTrace:
        """
        Runs discrete GRAPE from one starting pulse.

        Args:
            spec: Ensemble, amplitude and time grid
            initial: Starting codebook and mapping; its codebook size is kept

        Returns:
            OptimizeTrace whose discrete_pulse holds the final codebook and mapping
        """
        trace = optimize_discrete(spec, initial, self.options)
        self.record(trace.iterations, trace.final_phi)
        logger.debug(f"Discrete GRAPE (M={initial.m}) finished ({trace.reason}) after "
                     f"{trace.iterations} iterations: Phi={trace.final_phi:.10f}")
        return trace

    def get_status(self) -> Dict[str, Any]:
        return {"options": self.options, **self.run_stats}
