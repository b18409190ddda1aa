"""
Bloch-picture propagation of an inhomogeneous ensemble of uncoupled spins-1/2 under a
phase-modulated, constant-amplitude control.

Every isochromat obeys dM/dt = Omega x M with Omega = (w0 cos(theta), w0 sin(theta), w),
so a piecewise-constant phase makes every slice an exact rotation. All ensemble
operations are vectorized over offsets; states are float arrays of shape (n_off, 3).
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from core.errors import InvalidInputError
from core.pulses import ArrayLike, PhasePulse, frozen_array
from utils.logger import logger

# Below this rotation angle the Rodrigues coefficients switch to their Taylor limits
SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class BlochVector:
    """Magnetization (Mx, My, Mz) of a single isochromat."""
    mx: float
    my: float
    mz: float

    @classmethod
    def from_array(cls, values: ArrayLike) -> "BlochVector":
        array = np.asarray(values, dtype=float).reshape(3)
        return cls(float(array[0]), float(array[1]), float(array[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.mx, self.my, self.mz], dtype=float)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


NORTH_POLE = BlochVector(0.0, 0.0, 1.0)
SOUTH_POLE = BlochVector(0.0, 0.0, -1.0)


def ensemble_offsets(omega_max: float, n_off: int) -> np.ndarray:
    """
    Offsets (rad/s) equally spaced over [-omega_max, +omega_max], both ends included.
    A single isochromat sits on resonance.
    """
    if n_off < 1:
        logger.error(f"Ensemble needs at least one offset, got n_off={n_off}")
        raise InvalidInputError("n_off must be >= 1")
    if n_off == 1:
        return np.zeros(1)
    return np.linspace(-omega_max, omega_max, n_off)


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """
    The control problem: offsets (rad/s), control amplitude omega0 (rad/s), duration tf (s)
    split into n_steps slices, and the initial/target Bloch vectors.
    """
    offsets: np.ndarray
    omega0: float
    tf: float
    n_steps: int
    initial: BlochVector = NORTH_POLE
    target: BlochVector = SOUTH_POLE

    def __post_init__(self):
        offsets = frozen_array(np.atleast_1d(self.offsets), "offsets")
        if offsets.ndim != 1 or offsets.size < 1:
            logger.error(f"Invalid offsets array of shape {offsets.shape}")
            raise InvalidInputError("offsets must be a non-empty 1-D sequence")
        if np.any(np.diff(offsets) < 0):
            logger.error("Offsets are not sorted ascending")
            raise InvalidInputError("offsets must be sorted ascending")
        if self.omega0 < 0:
            raise InvalidInputError(f"omega0 must be >= 0, got {self.omega0}")
        if self.n_steps < 0:
            raise InvalidInputError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.n_steps > 0 and self.tf <= 0:
            raise InvalidInputError(f"tf must be > 0 when n_steps > 0, got {self.tf}")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "omega0", float(self.omega0))
        object.__setattr__(self, "tf", float(self.tf))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def symmetric(cls, omega_max: float, n_off: int, omega0: float, tf: float, n_steps: int,
                  initial: BlochVector = NORTH_POLE, target: BlochVector = SOUTH_POLE) -> "EnsembleSpec":
        return cls(ensemble_offsets(omega_max, n_off), omega0, tf, n_steps, initial, target)

    @property
    def dt(self) -> float:
        return self.tf / self.n_steps if self.n_steps > 0 else 0.0

    @property
    def n_off(self) -> int:
        return int(self.offsets.size)

    def initial_states(self) -> np.ndarray:
        return np.tile(self.initial.as_array(), (self.n_off, 1))

    def target_states(self) -> np.ndarray:
        return np.tile(self.target.as_array(), (self.n_off, 1))

    def describe(self) -> str:
        return (f"n_off={self.n_off}, omega_max={self.offsets.max():.6g} rad/s, "
                f"omega0={self.omega0:.6g} rad/s, tf={self.tf:.6g} s, N={self.n_steps}")


@dataclass(frozen=True, eq=False)
class PropagationRecord:
    """
    States indexed by time boundary k = 0..N, shape (N+1, n_off, 3).
    forward[k] is the state after k slices; adjoint[k] is the target pulled back
    to time k*dt, so forward[0] is the initial state and adjoint[N] the target.
    """
    forward: np.ndarray
    adjoint: Optional[np.ndarray] = None

    @property
    def finals(self) -> np.ndarray:
        return self.forward[-1]


def effective_field(theta_j: float, offset: float, omega0: float) -> np.ndarray:
    """Rotation vector (w0 cos theta, w0 sin theta, w) in rad/s."""
    if omega0 < 0:
        raise InvalidInputError(f"omega0 must be >= 0, got {omega0}")
    return np.array([omega0 * np.cos(theta_j), omega0 * np.sin(theta_j), offset], dtype=float)


def field_components(theta: np.ndarray, offsets: np.ndarray, omega0: float) -> np.ndarray:
    """Effective fields for every (slice, offset) pair, shape (N, n_off, 3)."""
    theta = np.asarray(theta, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    omega = np.empty(theta.shape + offsets.shape + (3,))
    omega[..., 0] = (omega0 * np.cos(theta))[..., None]
    omega[..., 1] = (omega0 * np.sin(theta))[..., None]
    omega[..., 2] = offsets
    return omega


def cross_generator(omega: np.ndarray) -> np.ndarray:
    """Matrix K with K @ m == omega x m, broadcast over leading axes."""
    omega = np.asarray(omega, dtype=float)
    generator = np.zeros(omega.shape[:-1] + (3, 3))
    generator[..., 0, 1] = -omega[..., 2]
    generator[..., 0, 2] = omega[..., 1]
    generator[..., 1, 0] = omega[..., 2]
    generator[..., 1, 2] = -omega[..., 0]
    generator[..., 2, 0] = -omega[..., 1]
    generator[..., 2, 1] = omega[..., 0]
    return generator


def rotation_matrices(omega: np.ndarray, dt: float) -> np.ndarray:
    """
    exp(dt K) in Rodrigues form I + c1 K + c2 K^2, broadcast over leading axes of omega.
    c1 = sin(a)/|W|, c2 = (1 - cos a)/|W|^2 with a = |W| dt; both fall back to their
    second-order limits dt and dt^2/2 when a < SMALL_ANGLE.

    K^2 = W W^T - |W|^2 I, so the matrix is assembled entrywise as
    (1 - c2 |W|^2) I + c1 K + c2 W W^T without any 3x3 products.
    """
    omega = np.asarray(omega, dtype=float)
    rate_sq = np.einsum("...c,...c->...", omega, omega)
    rate = np.sqrt(rate_sq)
    angle = rate * dt
    small = angle < SMALL_ANGLE
    safe_rate = np.where(small, 1.0, rate)
    c1 = np.where(small, dt, np.sin(angle) / safe_rate)
    c2 = np.where(small, 0.5 * dt * dt, 2.0 * np.sin(0.5 * angle) ** 2 / safe_rate ** 2)

    rotation = c2[..., None, None] * (omega[..., :, None] * omega[..., None, :])
    rotation += c1[..., None, None] * cross_generator(omega)
    diagonal = 1.0 - c2 * rate_sq
    for axis in range(3):
        rotation[..., axis, axis] += diagonal
    return rotation


def step_propagate(m: Union[BlochVector, ArrayLike], omega_eff: ArrayLike, dt: float) -> BlochVector:
    """Rotates m about omega_eff by |omega_eff| * dt. A zero field is the identity."""
    if dt <= 0:
        logger.error(f"step_propagate called with dt={dt}")
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    vector = m.as_array() if isinstance(m, BlochVector) else np.asarray(m, dtype=float).reshape(3)
    rotation = rotation_matrices(np.asarray(omega_eff, dtype=float).reshape(3), dt)
    return BlochVector.from_array(rotation @ vector)


def _phases(spec: EnsembleSpec, pulse: Union[PhasePulse, ArrayLike]) -> np.ndarray:
    theta = pulse.theta if isinstance(pulse, PhasePulse) else np.asarray(pulse, dtype=float)
    if theta.shape != (spec.n_steps,):
        logger.error(f"Pulse of shape {theta.shape} does not match N={spec.n_steps}")
        raise InvalidInputError(f"pulse length {theta.size} != n_steps {spec.n_steps}")
    return theta


def slice_propagators(spec: EnsembleSpec, pulse: Union[PhasePulse, ArrayLike]) -> np.ndarray:
    """Rotation of every slice for every offset, shape (N, n_off, 3, 3)."""
    theta = _phases(spec, pulse)
    return rotation_matrices(field_components(theta, spec.offsets, spec.omega0), spec.dt)


def forward_chain(rotations: np.ndarray, start: np.ndarray, record_states: bool = False) -> np.ndarray:
    """Applies rotations[0], rotations[1], ... to start (n_off, 3)."""
    state = np.array(start, dtype=float)
    if record_states:
        states = np.empty((rotations.shape[0] + 1,) + state.shape)
        states[0] = state
    for s in range(rotations.shape[0]):
        state = np.einsum("kij,kj->ki", rotations[s], state)
        if record_states:
            states[s + 1] = state
    return states if record_states else state


def backward_chain(rotations: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Pulls end back through the inverse (transposed) rotations; returns (N+1, n_off, 3)."""
    n_steps = rotations.shape[0]
    states = np.empty((n_steps + 1,) + end.shape)
    states[n_steps] = end
    for s in range(n_steps - 1, -1, -1):
        states[s] = np.einsum("kji,kj->ki", rotations[s], states[s + 1])
    return states


def propagate_ensemble(spec: EnsembleSpec, pulse: Union[PhasePulse, ArrayLike],
                       record_states: bool = False) -> Union[PropagationRecord, np.ndarray]:
    """
    Final states (n_off, 3), or a PropagationRecord holding every intermediate state
    when record_states is set.
    """
    rotations = slice_propagators(spec, pulse)
    states = forward_chain(rotations, spec.initial_states(), record_states=record_states)
    return PropagationRecord(forward=states) if record_states else states


def adjoint_propagate(spec: EnsembleSpec, pulse: Union[PhasePulse, ArrayLike]) -> np.ndarray:
    """Adjoint states indexed by time boundary, shape (N+1, n_off, 3); entry N is the target."""
    return backward_chain(slice_propagators(spec, pulse), spec.target_states())


def propagate_with_adjoint(spec: EnsembleSpec, pulse: Union[PhasePulse, ArrayLike]) -> PropagationRecord:
    """Forward and adjoint records from one set of slice rotations."""
    rotations = slice_propagators(spec, pulse)
    forward = forward_chain(rotations, spec.initial_states(), record_states=True)
    adjoint = backward_chain(rotations, spec.target_states())
    return PropagationRecord(forward=forward, adjoint=adjoint)


def z_torque(forward: np.ndarray, adjoint: np.ndarray) -> np.ndarray:
    """
    Ensemble mean of lambda_k . (z x M_k) = (M_k x lambda_k)_z at every time boundary,
    shape (N+1,). Rotating the field of slice j about z changes Phi at the rate
    z_torque[j+1] - z_torque[j].
    """
    torque = forward[..., 0] * adjoint[..., 1] - forward[..., 1] * adjoint[..., 0]
    return np.sum(torque, axis=-1) / forward.shape[-2]


def offset_contributions(finals: np.ndarray, target: Union[BlochVector, ArrayLike]) -> np.ndarray:
    """Projection of each final state onto the target."""
    target_vector = target.as_array() if isinstance(target, BlochVector) else np.asarray(target, dtype=float)
    return np.asarray(finals, dtype=float).reshape(-1, 3) @ target_vector


def ensemble_fidelity(finals: np.ndarray, target: Union[BlochVector, ArrayLike]) -> float:
    """Phi = (1/n_off) sum_i M_i(tf) . F, reduced in fixed pairwise order."""
    finals = np.asarray(finals, dtype=float)
    if finals.size == 0:
        logger.error("ensemble_fidelity called on an empty ensemble")
        raise InvalidInputError("ensemble must contain at least one isochromat")
    contributions = offset_contributions(finals, target)
    return float(np.sum(contributions) / contributions.size)


def figure_of_merit(spec: EnsembleSpec, pulse: Union[PhasePulse, ArrayLike]) -> float:
    """Phi of a phase pulse on the ensemble."""
    return ensemble_fidelity(propagate_ensemble(spec, pulse), spec.target)
