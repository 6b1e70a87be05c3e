"""
Ratio surrogates for trust-region policy updates.

Every surrogate is a value to MAXIMIZE, expressed as a function of the
probability ratio r = pi_new(a|h) / pi_old(a|h) and the joint advantage.
Each one returns the objective together with its closed-form derivative
with respect to r.

The functions accept scalars or numpy arrays. Arrays are evaluated
elementwise and scalars in give floats out, so the same code scores a
single sample or a whole minibatch.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Union

import numpy as np

from mars_ratio.ratio_objective_exception import InvalidInputException, RatioDomainException

Real = Union[float, np.ndarray]

LOG_RATIO_CLAMP = 40.0
TRUNCATION_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SurrogateEval:
    """Objective value and d(objective)/dr of a surrogate at some ratio."""
    objective: Real
    ratio_gradient: Real


SurrogateObjective = Callable[[Real], SurrogateEval]


@dataclass(frozen=True)
class GridInterval:
    """A maximal run of grid points (inclusive indices) with zero ratio-gradient."""
    start_index: int
    stop_index: int
    r_start: float
    r_stop: float

    @property
    def num_points(self) -> int:
        """Number of grid points in the run."""
        return self.stop_index - self.start_index + 1


def _unwrap(value):
    arr = np.asarray(value)
    return float(arr) if arr.ndim == 0 else arr


def _as_ratio(r) -> np.ndarray:
    arr = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(arr) & (arr > 0.0)):
        raise RatioDomainException("Invalid ratio: probability ratios must be finite and > 0")
    return arr


def _as_finite(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputException(f"Invalid {name}: value must be finite")
    return arr


def ratio_from_log_probs(logp_new: Real, logp_old: Real) -> Real:
    """
    Builds the probability ratio in log space.

    The log difference is clamped to [-40, 40] before exponentiation.

    Args:
        logp_new: log-probability of the sampled action under the current policy.
        logp_old: log-probability under the behaviour policy.

    Returns:
        exp(clamp(logp_new - logp_old)).
    """
    diff = _as_finite(logp_new, "log-probability") - _as_finite(logp_old, "log-probability")
    return _unwrap(np.exp(np.clip(diff, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)))


def log_ratio_clamped(logp_new: Real, logp_old: Real) -> Real:
    """True where the log-ratio clamp is active (the ratio has zero derivative there)."""
    diff = np.asarray(logp_new, dtype=float) - np.asarray(logp_old, dtype=float)
    mask = np.abs(diff) > LOG_RATIO_CLAMP
    return bool(mask) if mask.ndim == 0 else mask


def mars_penalty(r: Real) -> Real:
    """
    Geometric barrier r + 1/r - 2.

    Evaluated as (r - 1)^2 / r, the same quantity without the cancellation
    near r = 1. Zero only at r = 1 and symmetric under r -> 1/r.

    Raises:
        RatioDomainException: if r <= 0.
    """
    ratio = _as_ratio(r)
    return _unwrap((ratio - 1.0) ** 2 / ratio)


def mars_penalty_grad(r: Real) -> Real:
    """
    Derivative of the barrier, 1 - 1/r^2.

    Raises:
        RatioDomainException: if r <= 0.
    """
    ratio = _as_ratio(r)
    return _unwrap(1.0 - 1.0 / (ratio * ratio))


def mars_surrogate(r: Real, adv: Real, alpha: Real) -> SurrogateEval:
    """
    MARS per-sample surrogate r*A - alpha*(r + 1/r - 2).

    Args:
        r: probability ratio.
        adv: joint advantage.
        alpha: nonnegative penalty weight.

    Returns:
        SurrogateEval: objective and ratio-gradient A - alpha*(1 - 1/r^2).

    Raises:
        RatioDomainException: if r <= 0 or alpha < 0.
        InvalidInputException: if the advantage or alpha is not finite.
    """
    ratio = _as_ratio(r)
    advantage = _as_finite(adv, "advantage")
    weight = _as_finite(alpha, "penalty weight")
    if np.any(weight < 0.0):
        raise RatioDomainException("Invalid penalty weight: alpha must be >= 0")
    objective = ratio * advantage - weight * ((ratio - 1.0) ** 2 / ratio)
    gradient = advantage - weight * (1.0 - 1.0 / (ratio * ratio))
    return SurrogateEval(_unwrap(objective), _unwrap(gradient))


def mars_stationary_point(adv: float, alpha: float) -> Optional[float]:
    """
    The unique positive stationary point sqrt(alpha / (alpha - A)) of the MARS surrogate.

    Returns:
        float or None: None when alpha - A <= 0 (the gradient never vanishes on r > 0).

    Raises:
        RatioDomainException: if alpha <= 0.
    """
    advantage = float(_as_finite(adv, "advantage"))
    weight = float(_as_finite(alpha, "penalty weight"))
    if weight <= 0.0:
        raise RatioDomainException("Invalid penalty weight: alpha must be > 0 for a stationary point")
    margin = weight - advantage
    if margin <= 0.0:
        return None
    return float(np.sqrt(weight / margin))


def _check_clip_bounds(eps_lower: float, eps_upper: float):
    if not np.isfinite(eps_lower) or not np.isfinite(eps_upper):
        raise RatioDomainException("Invalid clip bounds: epsilons must be finite")
    if not 0.0 < eps_lower < 1.0:
        raise RatioDomainException("Invalid clip bounds: eps_lower must lie in (0, 1)")
    if eps_upper <= 0.0:
        raise RatioDomainException("Invalid clip bounds: eps_upper must be > 0")


def mappo_surrogate(r: Real, adv: Real, eps_lower: float,
                    eps_upper: Optional[float] = None) -> SurrogateEval:
    """
    Clipped surrogate min(r*A, clip(r, 1 - eps_lower, 1 + eps_upper)*A).

    The gradient is A inside the clip interval or on the side where the
    update does not improve the objective, and 0 past the clip boundary.
    Clip boundaries themselves take the interior value. Symmetric clipping
    is eps_upper = eps_lower (the default when eps_upper is omitted).

    Raises:
        RatioDomainException: on invalid bounds or r <= 0.
        InvalidInputException: if the advantage is not finite.
    """
    if eps_upper is None:
        eps_upper = eps_lower
    _check_clip_bounds(eps_lower, eps_upper)
    ratio = _as_ratio(r)
    advantage = _as_finite(adv, "advantage")
    lower = 1.0 - eps_lower
    upper = 1.0 + eps_upper
    objective = np.minimum(ratio * advantage, np.clip(ratio, lower, upper) * advantage)
    active = ((advantage >= 0.0) & (ratio <= upper)) | ((advantage < 0.0) & (ratio >= lower))
    gradient = np.where(active, advantage, 0.0)
    return SurrogateEval(_unwrap(objective), _unwrap(gradient))


def maspo_coefficient(adv: Real, eps: float) -> Real:
    """
    Quadratic penalty coefficient |A| / (2*eps) of the symmetric MASPO penalty.

    A zero advantage gets coefficient 0.

    Raises:
        RatioDomainException: unless 0 < eps < 1.
    """
    if not 0.0 < eps < 1.0:
        raise RatioDomainException("Invalid epsilon: must lie in (0, 1)")
    advantage = _as_finite(adv, "advantage")
    return _unwrap(np.abs(advantage) / (2.0 * eps))


def maspo_surrogate(r: Real, adv: Real, coeff: Real) -> SurrogateEval:
    """
    Quadratic-penalty surrogate r*A - coeff*(r - 1)^2.

    Its cost at r -> 0 is bounded by coeff, so it cannot rule out
    probability extinction.

    Raises:
        RatioDomainException: if r <= 0 or coeff < 0.
        InvalidInputException: if the advantage or coeff is not finite.
    """
    ratio = _as_ratio(r)
    advantage = _as_finite(adv, "advantage")
    coefficient = _as_finite(coeff, "coefficient")
    if np.any(coefficient < 0.0):
        raise RatioDomainException("Invalid coefficient: must be >= 0")
    objective = ratio * advantage - coefficient * (ratio - 1.0) ** 2
    gradient = advantage - 2.0 * coefficient * (ratio - 1.0)
    return SurrogateEval(_unwrap(objective), _unwrap(gradient))


def geometric_symmetrize(base_penalty: Callable[[Real], Real], r: Real) -> Real:
    """
    Geometric mean of a penalty at r and at 1/r.

    With base_penalty(r) = (r - 1)^2 this is exactly the MARS barrier.

    Args:
        base_penalty: nonnegative penalty defined on r > 0.
        r: probability ratio.

    Returns:
        sqrt(base_penalty(r) * base_penalty(1/r)).

    Raises:
        RatioDomainException: if r <= 0 or the base penalty goes negative.
    """
    ratio = _as_ratio(r)
    forward = np.asarray(base_penalty(ratio), dtype=float)
    inverse = np.asarray(base_penalty(1.0 / ratio), dtype=float)
    if np.any(forward < 0.0) or np.any(inverse < 0.0):
        raise RatioDomainException("Invalid base penalty: negative value encountered")
    return _unwrap(np.sqrt(forward * inverse))


def _validate_grid(r_grid) -> np.ndarray:
    grid = np.asarray(r_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise RatioDomainException("Invalid grid: need at least 2 points in a flat sequence")
    if not np.all(np.isfinite(grid) & (grid > 0.0)):
        raise RatioDomainException("Invalid grid: points must be finite and > 0")
    if not np.all(np.diff(grid) > 0.0):
        raise RatioDomainException("Invalid grid: points must be strictly increasing")
    return grid


def truncation_region(objective: SurrogateObjective, r_grid,
                      tolerance: float = TRUNCATION_TOLERANCE) -> List[GridInterval]:
    """
    Finds the maximal runs of grid points where the ratio-gradient vanishes.

    Args:
        objective: resolved single-argument surrogate (see trust_region.resolve).
        r_grid: strictly increasing positive ratios.
        tolerance: absolute threshold under which a gradient counts as zero.

    Returns:
        list: GridInterval runs, in grid order.

    Raises:
        RatioDomainException: if the grid is invalid.
    """
    grid = _validate_grid(r_grid)
    gradient = np.broadcast_to(np.asarray(objective(grid).ratio_gradient, dtype=float), grid.shape)
    zero = np.abs(gradient) < tolerance
    intervals = []
    start = None
    for index, is_zero in enumerate(zero):
        if is_zero and start is None:
            start = index
        elif not is_zero and start is not None:
            intervals.append(GridInterval(start, index - 1, float(grid[start]), float(grid[index - 1])))
            start = None
    if start is not None:
        intervals.append(GridInterval(start, grid.size - 1, float(grid[start]), float(grid[-1])))
    return intervals
