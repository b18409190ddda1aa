"""
Control representations shared by the optimizers and the quantizer. Nothing in here
touches spin dynamics, so the geometric quantizer can depend on it freely.
"""
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence, Union

import numpy as np

from core.errors import InvalidInputError
from utils.logger import logger

if TYPE_CHECKING:
    from core.spin_dynamics import EnsembleSpec

TWO_PI = 2.0 * np.pi

ArrayLike = Union[Sequence[float], np.ndarray]


def wrap_phase(theta: ArrayLike) -> np.ndarray:
    """Reduces angles to [0, 2pi)."""
    wrapped = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    # np.mod rounds tiny negative inputs up to exactly 2pi
    return np.where(wrapped >= TWO_PI, 0.0, wrapped)


def frozen_array(values: ArrayLike, what: str, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    if array.dtype.kind == "f" and not np.all(np.isfinite(array)):
        logger.error(f"Non-finite values in {what}")
        raise InvalidInputError(f"{what} contains non-finite values")
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class PhasePulse:
    """Piecewise-constant phase, one angle per slice, reduced to [0, 2pi)."""
    theta: np.ndarray

    def __post_init__(self):
        theta = frozen_array(wrap_phase(np.atleast_1d(self.theta)), "phase pulse")
        if theta.ndim != 1:
            raise InvalidInputError("phase pulse must be one-dimensional")
        object.__setattr__(self, "theta", theta)

    def __len__(self) -> int:
        return int(self.theta.size)

    @classmethod
    def constant(cls, n_steps: int, value: float = 0.0) -> "PhasePulse":
        return cls(np.full(n_steps, value, dtype=float))

    @classmethod
    def parabolic(cls, spec: "EnsembleSpec") -> "PhasePulse":
        """theta(t) = (pi/2)(2t/tf - 1)^2 sampled at slice midpoints: a linear frequency sweep."""
        t = (np.arange(spec.n_steps) + 0.5) * spec.dt
        return cls(0.5 * np.pi * (2.0 * t / spec.tf - 1.0) ** 2)

    @classmethod
    def random(cls, n_steps: int, seed: int) -> "PhasePulse":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(0.0, TWO_PI, n_steps))


@dataclass(frozen=True, eq=False)
class DiscretePulse:
    """
    Codebook of M phase values plus a mapping assigning one codebook entry to each of
    the N slices. Mapping entries are 0-based here; files use 1-based indices.
    """
    values: np.ndarray
    mapping: np.ndarray

    def __post_init__(self):
        values = frozen_array(wrap_phase(np.atleast_1d(self.values)), "codebook values")
        if values.ndim != 1 or values.size < 1:
            logger.error(f"Codebook must hold at least one value, got shape {values.shape}")
            raise InvalidInputError("codebook must contain at least one value")
        raw_mapping = np.atleast_1d(np.asarray(self.mapping))
        if raw_mapping.size and not np.issubdtype(raw_mapping.dtype, np.integer):
            if not np.all(np.equal(np.mod(raw_mapping, 1), 0)):
                raise InvalidInputError("mapping entries must be integers")
        mapping = frozen_array(raw_mapping, "mapping", dtype=np.int64)
        if mapping.ndim != 1:
            raise InvalidInputError("mapping must be one-dimensional")
        if mapping.size and (mapping.min() < 0 or mapping.max() >= values.size):
            logger.error(f"Mapping index out of range for a codebook of {values.size} values")
            raise InvalidInputError(
                f"mapping entries must lie in [0, {values.size - 1}], "
                f"got [{mapping.min()}, {mapping.max()}]"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mapping", mapping)

    @classmethod
    def from_one_based(cls, values: ArrayLike, mapping: Sequence[int]) -> "DiscretePulse":
        return cls(values, np.asarray(mapping, dtype=np.int64) - 1)

    @property
    def m(self) -> int:
        return int(self.values.size)

    @property
    def n_steps(self) -> int:
        return int(self.mapping.size)

    def with_values(self, values: ArrayLike) -> "DiscretePulse":
        return DiscretePulse(values, self.mapping)

    def with_mapping(self, mapping: ArrayLike) -> "DiscretePulse":
        return DiscretePulse(self.values, mapping)

    def usage(self) -> np.ndarray:
        """Number of slices mapped to each codebook entry."""
        return np.bincount(self.mapping, minlength=self.m)


def materialize(dp: DiscretePulse) -> PhasePulse:
    """The phase pulse theta_j = values[mapping[j]]."""
    return PhasePulse(dp.values[dp.mapping])
