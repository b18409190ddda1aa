"""
Lloyd quantization of a phase sequence on the circle.

The quantizer is purely geometric: it only sees the angles and never the spin
dynamics, so it imports nothing beyond the pulse containers.
"""
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.errors import InvalidInputError
from core.pulses import TWO_PI, ArrayLike, DiscretePulse, frozen_array, wrap_phase
from utils.logger import logger


@dataclass(frozen=True, eq=False)
class CircularCodebook:
    """
    M sorted centroids and the M sorted boundaries of their nearest-centroid arcs
    [B_j, B_j+1), the last arc wrapping through 2pi. empty_bins lists centroids whose
    arc had no member in the final update and therefore kept their previous position.
    """
    centroids: np.ndarray
    boundaries: np.ndarray
    iteration: int
    distortion: float
    empty_bins: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "centroids", frozen_array(self.centroids, "centroids"))
        object.__setattr__(self, "boundaries", frozen_array(self.boundaries, "boundaries"))
        if self.distortion < 0:
            raise InvalidInputError("distortion must be >= 0")

    @property
    def m(self) -> int:
        return int(self.centroids.size)


@dataclass(frozen=True, eq=False)
class LloydResult:
    codebook: CircularCodebook
    quantized: np.ndarray
    distortion_history: List[float]
    squared_distortion_history: List[float]
    converged: bool

    def to_discrete_pulse(self) -> DiscretePulse:
        return to_discrete_pulse(self.quantized, self.codebook.centroids)


def circular_distance(a: ArrayLike, b: ArrayLike) -> np.ndarray:
    """Shortest arc between angles, in [0, pi]."""
    gap = np.mod(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), TWO_PI)
    return np.minimum(gap, TWO_PI - gap)


def _sorted_angles(values: ArrayLike, what: str) -> np.ndarray:
    angles = np.sort(wrap_phase(np.atleast_1d(values)))
    if angles.size == 0:
        logger.error(f"Empty {what} passed to the quantizer")
        raise InvalidInputError(f"{what} must contain at least one angle")
    return angles


def initial_boundaries(m: int) -> np.ndarray:
    """B_j = (2j - 1) pi / M: equally spaced, cells centred on the uniform codebook 2pi(j-1)/M."""
    if m < 1:
        raise InvalidInputError(f"M must be >= 1, got {m}")
    return (2.0 * np.arange(m) + 1.0) * np.pi / m


def arc_widths(boundaries: np.ndarray) -> np.ndarray:
    return np.diff(np.append(boundaries, boundaries[0] + TWO_PI))


def bin_index(phases: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Arc holding each phase; phases below B_1 belong to the arc wrapping through 2pi."""
    return np.mod(np.searchsorted(boundaries, phases, side="right") - 1, boundaries.size)


def bin_means(phases: ArrayLike, boundaries: ArrayLike,
              previous: Optional[ArrayLike] = None) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Mean of the members of every arc, averaged after unwrapping the arc into
    [B_j, B_j + width), then reduced mod 2pi and sorted. An empty arc keeps the
    previous centroid lying inside it, or its midpoint when there is none.
    Returns the sorted centroids and the sorted positions of the empty arcs.
    """
    u = wrap_phase(np.atleast_1d(phases))
    if u.size == 0:
        raise InvalidInputError("bin_means needs at least one phase")
    bounds = _sorted_angles(boundaries, "boundaries")
    m = bounds.size
    widths = arc_widths(bounds)

    index = bin_index(u, bounds)
    unwrapped = u + TWO_PI * (u < bounds[index])
    counts = np.bincount(index, minlength=m)
    sums = np.bincount(index, weights=unwrapped, minlength=m)

    centroids = np.empty(m)
    filled = counts > 0
    centroids[filled] = sums[filled] / counts[filled]
    prior = None if previous is None else wrap_phase(np.atleast_1d(previous))
    for j in np.flatnonzero(~filled):
        centroids[j] = bounds[j] + 0.5 * widths[j]
        if prior is not None:
            inside = np.flatnonzero(np.mod(prior - bounds[j], TWO_PI) < widths[j])
            if inside.size:
                centroids[j] = prior[inside[0]]

    centroids = wrap_phase(centroids)
    order = np.argsort(centroids, kind="stable")
    empty_sorted = tuple(int(i) for i in np.flatnonzero(~filled[order]))
    return centroids[order], empty_sorted


def _nearest(phases: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return circular_distance(phases[:, None], centroids[None, :])


def distortion(phases: ArrayLike, centroids: ArrayLike) -> float:
    """J = sum of circular distances to the nearest centroid."""
    u = wrap_phase(np.atleast_1d(phases))
    y = _sorted_angles(centroids, "centroids")
    return float(np.sum(np.min(_nearest(u, y), axis=1)))


def squared_distortion(phases: ArrayLike, centroids: ArrayLike) -> float:
    """Sum of squared circular distances; the quantity the centroid/boundary iteration never increases."""
    u = wrap_phase(np.atleast_1d(phases))
    y = _sorted_angles(centroids, "centroids")
    return float(np.sum(np.min(_nearest(u, y), axis=1) ** 2))


def update_boundaries(centroids: ArrayLike) -> np.ndarray:
    """Midpoints of adjacent centroids around the circle, sorted."""
    y = _sorted_angles(centroids, "centroids")
    following = np.append(y[1:], y[0] + TWO_PI)
    return np.sort(wrap_phase(0.5 * (y + following)))


def project(phases: ArrayLike, centroids: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid of every phase (lower index on ties) and its index."""
    u = wrap_phase(np.atleast_1d(phases))
    y = np.asarray(centroids, dtype=float)
    index = np.argmin(_nearest(u, y), axis=1)
    return y[index], index


def _padded_codebook(distinct: np.ndarray, m: int) -> np.ndarray:
    """Distinct phases completed to M values by splitting the widest gaps."""
    values = np.sort(distinct)
    while values.size < m:
        gaps = arc_widths(values)
        widest = int(np.argmax(gaps))
        values = np.sort(np.append(values, wrap_phase(values[widest] + 0.5 * gaps[widest])))
    return values


def run_lloyd(phases: ArrayLike, m: int, epsilon: float = 1e-10, max_iters: int = 10000,
              boundaries: Optional[ArrayLike] = None) -> LloydResult:
    """
    Alternates arc means and midpoint boundaries until |J_k - J_k-1| <= epsilon (J_0 = 0)
    or max_iters, then projects every phase onto its nearest centroid. When the input
    holds at most M distinct angles the codebook is those angles, with zero distortion.
    """
    u = wrap_phase(np.atleast_1d(phases))
    if m < 1 or u.size < 1:
        logger.error(f"run_lloyd called with M={m}, N={u.size}")
        raise InvalidInputError("run_lloyd needs M >= 1 and at least one phase")
    if epsilon <= 0 or max_iters < 1:
        raise InvalidInputError("epsilon must be > 0 and max_iters >= 1")

    distinct = np.unique(u)
    if distinct.size <= m:
        centroids = _padded_codebook(distinct, m)
        codebook = CircularCodebook(centroids, update_boundaries(centroids), 1, 0.0)
        quantized, _ = project(u, centroids)
        return LloydResult(codebook, quantized, [0.0], [0.0], True)

    bounds = initial_boundaries(m) if boundaries is None else _sorted_angles(boundaries, "boundaries")
    if bounds.size != m:
        raise InvalidInputError(f"expected {m} initial boundaries, got {bounds.size}")

    previous = None
    previous_j = 0.0
    history: List[float] = []
    squared_history: List[float] = []
    converged = False
    iteration = 0
    for iteration in range(1, max_iters + 1):
        centroids, empty = bin_means(u, bounds, previous)
        current_j = distortion(u, centroids)
        history.append(current_j)
        squared_history.append(squared_distortion(u, centroids))
        if abs(current_j - previous_j) <= epsilon:
            converged = True
            break
        bounds = update_boundaries(centroids)
        previous, previous_j = centroids, current_j

    if empty:
        logger.warning(f"Lloyd finished with {len(empty)} empty bin(s) at M={m}")
    quantized, _ = project(u, centroids)
    codebook = CircularCodebook(centroids, update_boundaries(centroids), iteration, history[-1], empty)
    return LloydResult(codebook, quantized, history, squared_history, converged)


def to_discrete_pulse(quantized: ArrayLike, centroids: ArrayLike) -> DiscretePulse:
    """Codebook = centroids, mapping[j] = position of quantized[j] in the codebook."""
    omega = np.atleast_1d(np.asarray(quantized, dtype=float))
    y = np.atleast_1d(np.asarray(centroids, dtype=float))
    matches = omega[:, None] == y[None, :]
    if not np.all(matches.any(axis=1)):
        missing = int(np.count_nonzero(~matches.any(axis=1)))
        logger.error(f"{missing} quantized phase(s) are not codebook members")
        raise InvalidInputError("every quantized phase must be one of the centroids")
    return DiscretePulse(y, np.argmax(matches, axis=1))


class LloydQuantizer:
    """Lloyd quantizer driven by the `lloyd` section of config.yaml."""
    def __init__(self, config: Dict[str, Any]):
        self.config = config
        self.epsilon = config.get("epsilon", 1e-10)
        self.max_iters = config.get("max_iters", 10000)
        logger.info(f"Lloyd quantizer initialized. epsilon={self.epsilon}, max_iters={self.max_iters}")

    def quantize(self, phases: ArrayLike, m: int) -> LloydResult:
        """
        Quantizes a phase sequence onto M circular levels.

        Args:
            phases: Continuous slice phases in radians, any range
            m: Number of levels

        Returns:
            LloydResult with the final codebook, the per-iteration distortion and the convergence flag
        """
        result = run_lloyd(phases, m, epsilon=self.epsilon, max_iters=self.max_iters)
        logger.info(f"Lloyd M={m}: J={result.codebook.distortion:.6g} rad after "
                    f"{result.codebook.iteration} iteration(s), converged={result.converged}")
        return result
