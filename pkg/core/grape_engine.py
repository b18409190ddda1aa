"""
Phase-only GRAPE: adjoint-state gradient of Phi with respect to each slice phase,
backtracking line search, and the ascent loop.
"""
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np

from core.errors import InvalidInputError
from core.pulses import DiscretePulse, PhasePulse, wrap_phase
from core.spin_dynamics import (
    EnsembleSpec,
    PropagationRecord,
    backward_chain,
    ensemble_fidelity,
    figure_of_merit,
    forward_chain,
    propagate_with_adjoint,
    slice_propagators,
    z_torque,
)
from utils.logger import logger

GRADIENT_FORMS = ("exact", "first_order")
DIRECTIONS = ("conjugate", "gradient")


@dataclass(frozen=True)
class GrapeOptions:
    """
    epsilon0 is the largest phase change (rad) tried first: the initial step is
    epsilon0 / max|d|, then shrunk by backtrack_factor until Phi rises by at least
    sufficient_increase * step * (g . d), or the step drops below min_step.

    Inside the ascent loops, carry_step starts each search from the previous accepted
    phase change times step_growth (never above epsilon0), and direction="conjugate"
    searches along Polak-Ribiere directions instead of the bare gradient. The run
    converges once the Phi gain stays below tol_delta_phi for `patience` iterations.
    """
    max_iters: int = 5000
    epsilon0: float = 0.5
    backtrack_factor: float = 0.5
    min_step: float = 1e-12
    sufficient_increase: float = 1e-4
    carry_step: bool = True
    step_growth: float = 2.0
    gradient_form: str = "exact"
    direction: str = "conjugate"
    tol_delta_phi: float = 1e-8
    patience: int = 5
    log_every: int = 100

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidInputError(f"max_iters must be >= 1, got {self.max_iters}")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise InvalidInputError(f"backtrack_factor must lie in (0, 1), got {self.backtrack_factor}")
        if self.min_step <= 0:
            raise InvalidInputError(f"min_step must be > 0, got {self.min_step}")
        if self.epsilon0 <= 0:
            raise InvalidInputError(f"epsilon0 must be > 0, got {self.epsilon0}")
        if not 0.0 <= self.sufficient_increase < 1.0:
            raise InvalidInputError(f"sufficient_increase must lie in [0, 1), got {self.sufficient_increase}")
        if self.step_growth < 1.0:
            raise InvalidInputError(f"step_growth must be >= 1, got {self.step_growth}")
        if self.gradient_form not in GRADIENT_FORMS:
            raise InvalidInputError(f"gradient_form must be one of {GRADIENT_FORMS}, got '{self.gradient_form}'")
        if self.direction not in DIRECTIONS:
            raise InvalidInputError(f"direction must be one of {DIRECTIONS}, got '{self.direction}'")
        if self.patience < 1:
            raise InvalidInputError(f"patience must be >= 1, got {self.patience}")

    @classmethod
    def from_config(cls, config: Optional[Dict[str, Any]] = None, **overrides):
        """Picks the known keys out of a config section; unknown keys are ignored."""
        merged = dict(config or {})
        merged.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in merged.items() if k in known})


@dataclass
class OptimizeTrace:
    """Phi per accepted iteration (entry 0 is the initial guess) and the final control."""
    phi_history: List[float]
    final_pulse: PhasePulse
    iterations: int
    reason: str
    discrete_pulse: Optional[DiscretePulse] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_phi(self) -> float:
        return self.phi_history[-1]

    @property
    def initial_phi(self) -> float:
        return self.phi_history[0]


@dataclass(frozen=True, eq=False)
class LineSearchResult:
    """Accepted step, the new point (phases or codebook values), its Phi, and the stall flag."""
    step: float
    point: np.ndarray
    phi: float
    stalled: bool
    trials: int
    change: float = 0.0

    @property
    def pulse(self) -> PhasePulse:
        return PhasePulse(self.point)


def backtracking_ascent(objective: Callable[[np.ndarray], float], x: np.ndarray, direction: np.ndarray,
                        phi0: float, options: GrapeOptions, initial_change: Optional[float] = None,
                        slope: Optional[float] = None) -> LineSearchResult:
    """
    First step in {eps0, eps0*b, eps0*b^2, ...} with objective(wrap(x + eps*direction)) > phi0
    and a gain of at least sufficient_increase * eps * slope. eps0 is epsilon0 / max|direction|,
    or initial_change / max|direction| when a smaller initial_change is given. slope defaults
    to direction . direction, the directional derivative when direction is the gradient.
    Angles are wrapped after every trial.
    """
    x = np.asarray(x, dtype=float)
    direction = np.asarray(direction, dtype=float)
    scale = float(np.max(np.abs(direction))) if direction.size else 0.0
    if scale == 0.0 or not np.isfinite(scale):
        return LineSearchResult(0.0, x, phi0, True, 0)
    if slope is None:
        slope = float(direction @ direction)

    change = options.epsilon0 if initial_change is None else min(initial_change, options.epsilon0)
    step = change / scale
    trials = 0
    while step >= options.min_step:
        trials += 1
        candidate = wrap_phase(x + step * direction)
        phi = objective(candidate)
        if phi > phi0 and phi - phi0 >= options.sufficient_increase * step * slope:
            return LineSearchResult(step, candidate, phi, False, trials, step * scale)
        step *= options.backtrack_factor
    return LineSearchResult(0.0, x, phi0, True, trials)


class TrialPropagator:
    """
    Phi as a function of the slice phases. Keeps the rotations and forward states of the
    last point evaluated, so the gradient at an accepted trial costs one backward pass.
    """
    def __init__(self, spec: EnsembleSpec):
        self.spec = spec
        self.point: Optional[np.ndarray] = None
        self._rotations: Optional[np.ndarray] = None
        self._forward: Optional[np.ndarray] = None
        self._adjoint: Optional[np.ndarray] = None
        self.evaluations = 0

    def __call__(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        self._rotations = slice_propagators(self.spec, theta)
        self._forward = forward_chain(self._rotations, self.spec.initial_states(), record_states=True)
        self._adjoint = None
        self.point = theta
        self.evaluations += 1
        return ensemble_fidelity(self._forward[-1], self.spec.target)

    def record(self, theta: np.ndarray) -> PropagationRecord:
        """Forward and adjoint states at theta, reusing the last evaluation when it matches."""
        if self.point is None or not np.array_equal(self.point, theta):
            self(theta)
        if self._adjoint is None:
            self._adjoint = backward_chain(self._rotations, self.spec.target_states())
        return PropagationRecord(forward=self._forward, adjoint=self._adjoint)


class AscentStepper:
    """
    Line-search state carried across the iterations of one ascent loop: the last accepted
    phase change and, for conjugate directions, the previous gradient and direction.
    A stalled search along anything but the plain gradient from epsilon0 is retried that way
    before the stall is reported.
    """
    def __init__(self, options: GrapeOptions):
        self.options = options
        self.change: Optional[float] = None
        self._gradient: Optional[np.ndarray] = None
        self._direction: Optional[np.ndarray] = None
        self.restarts = 0

    def reset(self):
        """Forgets the conjugate-direction memory (the objective changed shape)."""
        self._gradient = None
        self._direction = None

    def _search_direction(self, gradient: np.ndarray) -> np.ndarray:
        previous = self._gradient
        if self.options.direction != "conjugate" or previous is None or previous.shape != gradient.shape:
            return gradient
        denominator = float(previous @ previous)
        if denominator == 0.0:
            return gradient
        beta = max(0.0, float(gradient @ (gradient - previous)) / denominator)
        if beta == 0.0:
            return gradient
        direction = gradient + beta * self._direction
        if float(gradient @ direction) <= 0.0:
            return gradient
        return direction

    def step(self, objective: Callable[[np.ndarray], float], x: np.ndarray, gradient: np.ndarray,
             phi0: float) -> LineSearchResult:
        direction = self._search_direction(gradient)
        initial = self.change if self.options.carry_step else None
        result = backtracking_ascent(objective, x, direction, phi0, self.options, initial,
                                     float(gradient @ direction))
        if result.stalled and (direction is not gradient or initial is not None):
            retry = backtracking_ascent(objective, x, gradient, phi0, self.options)
            result = replace(retry, trials=result.trials + retry.trials)
            direction = gradient
            self.restarts += 1
        if result.stalled:
            self.reset()
            return result

        self._gradient, self._direction = gradient, direction
        if self.options.carry_step:
            self.change = result.change * self.options.step_growth
        return result


def _theta(spec: EnsembleSpec, pulse: Union[PhasePulse, np.ndarray]) -> np.ndarray:
    theta = pulse.theta if isinstance(pulse, PhasePulse) else np.asarray(pulse, dtype=float)
    if theta.shape != (spec.n_steps,):
        logger.error(f"Pulse of length {theta.size} does not match N={spec.n_steps}")
        raise InvalidInputError(f"pulse length {theta.size} != n_steps {spec.n_steps}")
    return theta


def gradient_from_record(spec: EnsembleSpec, theta: np.ndarray, record: PropagationRecord,
                         form: str = "exact") -> np.ndarray:
    """
    "exact": the slice rotation about the tilted axis is Rz(theta) R(0) Rz(-theta), so
    dPhi/dtheta_j = z_torque[j+1] - z_torque[j] with no approximation.
    "first_order": (dt/n_off) sum_w lambda_j . (dOmega_j/dtheta_j x M_j), both states
    taken at the start of slice j; its error is O(|Omega| dt) relative.
    """
    if form == "exact":
        return np.diff(z_torque(record.forward, record.adjoint))
    if form == "first_order":
        d_omega = np.zeros((theta.size, 3))
        d_omega[:, 0] = -spec.omega0 * np.sin(theta)
        d_omega[:, 1] = spec.omega0 * np.cos(theta)
        torque = np.cross(d_omega[:, None, :], record.forward[:-1])
        return spec.dt * np.einsum("skc,skc->s", record.adjoint[:-1], torque) / spec.n_off
    logger.error(f"Unknown gradient form '{form}'")
    raise InvalidInputError(f"gradient form must be one of {GRADIENT_FORMS}, got '{form}'")


def phase_gradient(spec: EnsembleSpec, pulse: Union[PhasePulse, np.ndarray], form: str = "exact") -> np.ndarray:
    """Gradient of Phi with respect to every slice phase; one forward and one backward pass."""
    theta = _theta(spec, pulse)
    if theta.size == 0:
        return np.zeros(0)
    return gradient_from_record(spec, theta, propagate_with_adjoint(spec, theta), form)


def line_search(spec: EnsembleSpec, pulse: Union[PhasePulse, np.ndarray], gradient: np.ndarray,
                options: GrapeOptions, phi0: Optional[float] = None) -> LineSearchResult:
    """Backtracking along the gradient from epsilon0; a stall returns the original pulse."""
    theta = _theta(spec, pulse)
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != theta.shape:
        logger.error(f"Gradient of length {gradient.size} does not match N={spec.n_steps}")
        raise InvalidInputError("gradient length must equal n_steps")
    if phi0 is None:
        phi0 = figure_of_merit(spec, theta)
    return backtracking_ascent(lambda candidate: figure_of_merit(spec, candidate), theta, gradient, phi0, options)


def optimize_continuous(spec: EnsembleSpec, initial_pulse: PhasePulse, options: GrapeOptions) -> OptimizeTrace:
    """Gradient ascent until max_iters, a line-search stall, or a run of negligible gains."""
    theta = _theta(spec, initial_pulse).copy()
    propagator = TrialPropagator(spec)
    stepper = AscentStepper(options)
    phi = propagator(theta)
    history = [phi]
    reason = "max_iters"
    quiet_iterations = 0

    for iteration in range(1, options.max_iters + 1):
        if theta.size:
            gradient = gradient_from_record(spec, theta, propagator.record(theta), options.gradient_form)
        else:
            gradient = np.zeros(0)
        result = stepper.step(propagator, theta, gradient, phi)
        if result.stalled:
            reason = "stalled"
            break

        gain = result.phi - phi
        theta, phi = result.point, result.phi
        history.append(phi)
        if iteration % options.log_every == 0:
            logger.debug(f"GRAPE iteration {iteration}: Phi={phi:.10f}, change={result.change:.3e} rad, "
                         f"trials={result.trials}")

        quiet_iterations = quiet_iterations + 1 if gain < options.tol_delta_phi else 0
        if quiet_iterations >= options.patience:
            reason = "converged"
            break

    return OptimizeTrace(
        phi_history=history,
        final_pulse=PhasePulse(theta),
        iterations=len(history) - 1,
        reason=reason,
        extra={"evaluations": propagator.evaluations, "restarts": stepper.restarts},
    )


class GrapeEngine:
    """
    Continuous phase-only GRAPE driven by the `grape` section of config.yaml.
    Starts from the parabolic (linear-sweep) phase when no initial pulse is given.
    """
    def __init__(self, config: Dict[str, Any]):
        self.config = config
        self.options = GrapeOptions.from_config(config)
        self.run_stats = {
            "total_runs": 0,
            "total_iterations": 0,
            "best_phi": None,
            "last_reason": None,
        }
        logger.info(f"GRAPE engine initialized. max_iters={self.options.max_iters}, "
                    f"direction={self.options.direction}, gradient={self.options.gradient_form}, "
                    f"tol={self.options.tol_delta_phi}")

    def optimize(self, spec: EnsembleSpec, initial_pulse: Optional[PhasePulse] = None) -> OptimizeTrace:
        """
        Runs continuous GRAPE on one ensemble.

        Args:
            spec: Ensemble, amplitude and time grid to optimize for
            initial_pulse: Starting phases; the parabolic phase when omitted

        Returns:
            OptimizeTrace with the Phi history, the final pulse and the stop reason
        """
        pulse = initial_pulse if initial_pulse is not None else PhasePulse.parabolic(spec)
        logger.info(f"Continuous GRAPE on {spec.describe()}")
        trace = optimize_continuous(spec, pulse, self.options)
        self._update_stats(trace)
        logger.info(f"Continuous GRAPE finished ({trace.reason}) after {trace.iterations} iterations: "
                    f"Phi {trace.initial_phi:.6f} -> {trace.final_phi:.10f}")
        if trace.reason == "stalled":
            logger.warning("Line search stalled before convergence criteria were met")
        return trace

    def _update_stats(self, trace: OptimizeTrace):
        self.run_stats["total_runs"] += 1
        self.run_stats["total_iterations"] += trace.iterations
        self.run_stats["last_reason"] = trace.reason
        best = self.run_stats["best_phi"]
        self.run_stats["best_phi"] = trace.final_phi if best is None else max(best, trace.final_phi)

    def get_status(self) -> Dict[str, Any]:
        return {"options": self.options, **self.run_stats}
