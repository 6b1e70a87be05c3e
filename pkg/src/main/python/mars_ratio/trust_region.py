"""
Trust-region parameterizations.

Maps each objective variant's boundary parameters to per-sample target
ratios, penalty weights and quadratic coefficients, and binds them into a
single-argument surrogate of the ratio.

Variants:
    - mappo, mappo_asymmetric: clipped surrogates.
    - maspo, maspo_asymmetric: quadratic penalties.
    - mars, mars_multiplicative_symmetric, mars_additive_symmetric:
      the geometric barrier with targets (B_lower, B_upper), (1/b, b)
      and (2 - b, b).
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from mars_ratio.objective_core import (Real, SurrogateObjective, maspo_coefficient,
                                       maspo_surrogate, mappo_surrogate, mars_penalty_grad,
                                       mars_surrogate, _as_finite, _unwrap)
from mars_ratio.ratio_objective_exception import (RatioDomainException,
                                                  UnsupportedVariantException)


class Variant(str, Enum):
    """The seven objective variants."""
    MAPPO = "mappo"
    MAPPO_ASYMMETRIC = "mappo_asymmetric"
    MASPO = "maspo"
    MASPO_ASYMMETRIC = "maspo_asymmetric"
    MARS = "mars"
    MARS_MULTIPLICATIVE_SYMMETRIC = "mars_multiplicative_symmetric"
    MARS_ADDITIVE_SYMMETRIC = "mars_additive_symmetric"

    @property
    def is_mars_family(self) -> bool:
        """True for the geometric-barrier variants."""
        return self in MARS_FAMILY

    @property
    def is_clip(self) -> bool:
        """True for the clipped variants, which have no target ratio."""
        return self in (Variant.MAPPO, Variant.MAPPO_ASYMMETRIC)


MARS_FAMILY = frozenset({Variant.MARS, Variant.MARS_MULTIPLICATIVE_SYMMETRIC,
                         Variant.MARS_ADDITIVE_SYMMETRIC})

PARAMETER_NAMES: Dict[Variant, Tuple[str, ...]] = {
    Variant.MAPPO: ("eps",),
    Variant.MAPPO_ASYMMETRIC: ("eps_lower", "eps_upper"),
    Variant.MASPO: ("eps",),
    Variant.MASPO_ASYMMETRIC: ("eps_lower", "eps_upper"),
    Variant.MARS: ("b_lower", "b_upper"),
    Variant.MARS_MULTIPLICATIVE_SYMMETRIC: ("b",),
    Variant.MARS_ADDITIVE_SYMMETRIC: ("b",),
}

DEFAULT_PARAMETERS: Dict[Variant, Dict[str, float]] = {
    Variant.MAPPO: {"eps": 0.2},
    Variant.MAPPO_ASYMMETRIC: {"eps_lower": 0.2, "eps_upper": 0.2},
    Variant.MASPO: {"eps": 0.2},
    Variant.MASPO_ASYMMETRIC: {"eps_lower": 0.2, "eps_upper": 0.2},
    Variant.MARS: {"b_lower": 0.8, "b_upper": 1.25},
    Variant.MARS_MULTIPLICATIVE_SYMMETRIC: {"b": 1.25},
    Variant.MARS_ADDITIVE_SYMMETRIC: {"b": 1.25},
}


def parse_variant(value) -> Variant:
    """
    Converts a variant name into a Variant.

    Raises:
        UnsupportedVariantException: if the name is unknown.
    """
    if isinstance(value, Variant):
        return value
    try:
        return Variant(value)
    except ValueError as exc:
        names = ", ".join(v.value for v in Variant)
        raise UnsupportedVariantException(
            f"Unknown variant '{value}': must be one of {names}") from exc


@dataclass(frozen=True)
class TrustRegionSpec:
    """
    Which objective variant is active plus its boundary parameters.

    Use TrustRegionSpec.create to fill in default parameters.
    """
    variant: Variant
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        variant = parse_variant(self.variant)
        object.__setattr__(self, "variant", variant)
        expected = set(PARAMETER_NAMES[variant])
        given = set(self.params)
        if given != expected:
            raise RatioDomainException(
                f"Invalid parameters for {variant.value}: expected {sorted(expected)}, "
                f"got {sorted(given)}")
        params = {}
        for name in PARAMETER_NAMES[variant]:
            value = self.params[name]
            if isinstance(value, bool) or not isinstance(value, (int, float)) \
                    or not np.isfinite(value):
                raise RatioDomainException(f"Invalid {name}: must be a finite number")
            params[name] = float(value)
        object.__setattr__(self, "params", params)
        self.__validate()

    def __validate(self):
        variant = self.variant
        if variant in (Variant.MAPPO, Variant.MASPO):
            if not 0.0 < self.params["eps"] < 1.0:
                raise RatioDomainException("Invalid eps: must satisfy 0 < eps < 1")
        elif variant in (Variant.MAPPO_ASYMMETRIC, Variant.MASPO_ASYMMETRIC):
            if not 0.0 < self.params["eps_lower"] < 1.0:
                raise RatioDomainException("Invalid eps_lower: must satisfy 0 < eps_lower < 1")
            if self.params["eps_upper"] <= 0.0:
                raise RatioDomainException("Invalid eps_upper: must be > 0")
        elif variant == Variant.MARS:
            if not 0.0 < self.params["b_lower"] < 1.0:
                raise RatioDomainException("Invalid b_lower: must satisfy 0 < B_lower < 1")
            if self.params["b_upper"] <= 1.0:
                raise RatioDomainException("Invalid b_upper: must satisfy B_upper > 1")
        elif variant == Variant.MARS_MULTIPLICATIVE_SYMMETRIC:
            if self.params["b"] <= 1.0:
                raise RatioDomainException("Invalid b: must satisfy b > 1")
        elif not 1.0 < self.params["b"] < 2.0:
            raise RatioDomainException("Invalid b: must satisfy 1 < b < 2")

    @classmethod
    def create(cls, variant, **params) -> "TrustRegionSpec":
        """Builds a spec, taking unspecified parameters from the defaults."""
        resolved = parse_variant(variant)
        merged = dict(DEFAULT_PARAMETERS[resolved])
        merged.update(params)
        return cls(resolved, merged)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrustRegionSpec":
        """Inverse of to_dict; missing parameters take their defaults."""
        data = dict(data)
        if "variant" not in data:
            raise RatioDomainException("Missing variant in trust region description")
        variant = data.pop("variant")
        return cls.create(variant, **data)

    def to_dict(self) -> Dict:
        """Flat dictionary with the variant name and its parameters."""
        result = {"variant": self.variant.value}
        result.update(self.params)
        return result

    def resolved_bounds(self) -> Tuple[float, float]:
        """
        Target ratios (lower, upper) for variants that have them.

        Raises:
            UnsupportedVariantException: for the clipped variants.
        """
        variant = self.variant
        if variant == Variant.MARS:
            return self.params["b_lower"], self.params["b_upper"]
        if variant == Variant.MARS_MULTIPLICATIVE_SYMMETRIC:
            return 1.0 / self.params["b"], self.params["b"]
        if variant == Variant.MARS_ADDITIVE_SYMMETRIC:
            return 2.0 - self.params["b"], self.params["b"]
        if variant == Variant.MASPO_ASYMMETRIC:
            return 1.0 - self.params["eps_lower"], 1.0 + self.params["eps_upper"]
        if variant == Variant.MASPO:
            return 1.0 - self.params["eps"], 1.0 + self.params["eps"]
        raise UnsupportedVariantException(
            f"Variant {variant.value} clips the ratio and has no target ratio")

    def clip_epsilons(self) -> Tuple[float, float]:
        """(eps_lower, eps_upper) of a clipped variant."""
        if self.variant == Variant.MAPPO:
            return self.params["eps"], self.params["eps"]
        if self.variant == Variant.MAPPO_ASYMMETRIC:
            return self.params["eps_lower"], self.params["eps_upper"]
        raise UnsupportedVariantException(f"Variant {self.variant.value} does not clip the ratio")


def select_target(adv: Real, spec: TrustRegionSpec) -> Real:
    """
    Picks the target ratio for an advantage: B_upper when A >= 0, B_lower otherwise.

    Raises:
        UnsupportedVariantException: for the clipped variants.
    """
    lower, upper = spec.resolved_bounds()
    advantage = _as_finite(adv, "advantage")
    return _unwrap(np.where(advantage >= 0.0, upper, lower))


def alpha_for_target(adv: Real, target: Real) -> Real:
    """
    Penalty weight that places the MARS stationary point at the target ratio.

    alpha = A / (1 - target^-2), and exactly 0 when A = 0.

    Args:
        adv: joint advantage.
        target: positive target ratio different from 1.

    Returns:
        The penalty weight.

    Raises:
        RatioDomainException: if target <= 0 or target == 1.
    """
    advantage = _as_finite(adv, "advantage")
    goal = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(goal) & (goal > 0.0)):
        raise RatioDomainException("Invalid target: target ratios must be finite and > 0")
    if np.any(goal == 1.0):
        raise RatioDomainException("Invalid target: a target ratio of 1 makes alpha undefined")
    slope = np.asarray(mars_penalty_grad(goal), dtype=float)
    alpha = np.divide(advantage, slope, out=np.zeros(np.broadcast(advantage, slope).shape),
                      where=np.broadcast_to(advantage != 0.0, np.broadcast(advantage, slope).shape))
    return _unwrap(alpha)


def alpha_for_additive_epsilon(adv: Real, eps: float) -> Real:
    """
    Penalty weight for the additive target 1 + sign(A)*eps.

    Raises:
        RatioDomainException: unless 0 < eps < 1.
    """
    if not 0.0 < eps < 1.0:
        raise RatioDomainException("Invalid epsilon: must lie in (0, 1)")
    advantage = _as_finite(adv, "advantage")
    return alpha_for_target(advantage, np.where(advantage >= 0.0, 1.0 + eps, 1.0 - eps))


def maspo_asymmetric_coefficient(adv: Real, spec: TrustRegionSpec) -> Real:
    """Quadratic coefficient A / (2*(r_target - 1)), 0 when A = 0."""
    advantage = _as_finite(adv, "advantage")
    target = np.asarray(select_target(advantage, spec), dtype=float)
    shape = np.broadcast(advantage, target).shape
    coeff = np.divide(advantage, 2.0 * (target - 1.0), out=np.zeros(shape),
                      where=np.broadcast_to(advantage != 0.0, shape))
    return _unwrap(coeff)


def resolve(spec: TrustRegionSpec, adv: Real, calibration: Optional[Real] = None) -> SurrogateObjective:
    """
    Binds a variant's coefficients for the given advantage(s).

    The penalty weight and coefficients are fixed from the advantage when
    this is called; the returned function only varies the ratio.

    Args:
        spec: the trust region.
        adv: joint advantage, scalar or array broadcastable against the ratios.
        calibration: advantage the penalty weight and coefficients are
            computed from; defaults to adv. The surrogate still weighs the
            ratio by adv.

    Returns:
        callable: r -> SurrogateEval.
    """
    advantage = _as_finite(adv, "advantage")
    reference = advantage if calibration is None else _as_finite(calibration, "calibration advantage")
    variant = spec.variant
    if variant.is_clip:
        eps_lower, eps_upper = spec.clip_epsilons()
        return lambda r: mappo_surrogate(r, advantage, eps_lower, eps_upper)
    if variant == Variant.MASPO:
        coeff = maspo_coefficient(reference, spec.params["eps"])
        return lambda r: maspo_surrogate(r, advantage, coeff)
    if variant == Variant.MASPO_ASYMMETRIC:
        coeff = maspo_asymmetric_coefficient(reference, spec)
        return lambda r: maspo_surrogate(r, advantage, coeff)
    alpha = alpha_for_target(reference, select_target(reference, spec))
    return lambda r: mars_surrogate(r, advantage, alpha)
