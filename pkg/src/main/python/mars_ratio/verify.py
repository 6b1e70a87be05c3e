"""
Executable checks of the surrogate identities and gradient implementations.

Suites:
    - symmetry: inversion symmetry and the geometric-mean identity of the barrier.
    - propositions: barrier against extinction, no gradient truncation for
      MARS, truncation for clipping, finite extinction cost for MASPO.
    - calibration: stationarity at the target ratio, the additive-epsilon
      identity, weight signs and symmetric bounds.
    - gradients: analytic derivatives against central finite differences,
      from the scalar surrogates up to the actor and critic losses.

Every check is deterministic given the seed. A penalty_override replaces
the barrier in the checks that take a penalty; the mutation harness uses it
as a negative control.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from mars_ratio.approximator import (CATEGORICAL, GAUSSIAN, ParameterVector, init_mlp,
                                     mlp_forward, policy_from_output, policy_output_dim)
from mars_ratio.objective_core import (Real, geometric_symmetrize, maspo_coefficient,
                                       maspo_surrogate, mappo_surrogate, mars_penalty,
                                       mars_stationary_point, mars_surrogate, truncation_region)
from mars_ratio.ratio_objective_exception import (RatioObjectiveException,
                                                  UnsupportedVariantException)
from mars_ratio.trainer import Minibatch, actor_loss, critic_loss
from mars_ratio.trust_region import (MARS_FAMILY, TrustRegionSpec, Variant, alpha_for_additive_epsilon,
                                     alpha_for_target, resolve, select_target)

logger = logging.getLogger(__name__)

SUITES = ("symmetry", "propositions", "calibration", "gradients")
GRADIENT_SEEDS = 10
LOSS_TOLERANCE = 1e-4
SURROGATE_TOLERANCE = 1e-5
KINK_EXCLUSION = 1e-4

Penalty = Callable[[Real], Real]


@dataclass(frozen=True)
class CheckContext:
    """Inputs shared by every check of one verification run."""
    seed: int = 0
    penalty: Penalty = mars_penalty

    def rng(self, offset: int = 0) -> np.random.Generator:
        """Independent generator per check."""
        return np.random.default_rng([self.seed, offset])


@dataclass(frozen=True)
class CheckResult:
    """Verdict of one check with the observed and expected values."""
    name: str
    suite: str
    passed: bool
    observed: str
    expected: str
    detail: str = ""


@dataclass
class VerificationReport:
    """All check results of one run."""
    seed: int
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        """True when every check passed."""
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[CheckResult]:
        """Checks that failed."""
        return [check for check in self.checks if not check.passed]

    def to_dict(self) -> Dict:
        """JSON-ready form."""
        return {"seed": self.seed, "passed": self.passed,
                "checks": [asdict(check) for check in self.checks]}

    def write(self, path: str):
        """Writes the JSON report."""
        with open(path, "w", encoding="utf-8") as file:
            json.dump(self.to_dict(), file, indent=4)


CHECKS: Dict[str, List] = {suite: [] for suite in SUITES}


def register(suite: str):
    """Adds the decorated check to a suite."""
    def decorator(check):
        CHECKS[suite].append(check)
        return check
    return decorator


def _result(name: str, suite: str, passed, observed, expected, detail: str = "") -> CheckResult:
    return CheckResult(name, suite, bool(passed), str(observed), str(expected), detail)


def _relative(a: np.ndarray, b: np.ndarray, floor: float = 1.0) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def central_difference(loss: Callable[[ParameterVector], float], params: ParameterVector,
                       step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar loss over every parameter."""
    numeric = np.zeros(params.size)
    for index in range(params.size):
        plus = params.copy()
        plus.values[index] += step
        minus = params.copy()
        minus.values[index] -= step
        numeric[index] = (loss(plus) - loss(minus)) / (2.0 * step)
    return numeric


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||analytic - numeric|| relative to the larger of the two norms."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def default_specs() -> List[TrustRegionSpec]:
    """One spec per variant, default parameters."""
    return [TrustRegionSpec.create(variant) for variant in Variant]


LOG_GRID = np.logspace(-4.0, 4.0, 1000)


@register("symmetry")
def check_inversion_symmetry(context: CheckContext) -> CheckResult:
    """penalty(r) == penalty(1/r) over a log grid."""
    forward = np.asarray(context.penalty(LOG_GRID), dtype=float)
    inverse = np.asarray(context.penalty(1.0 / LOG_GRID), dtype=float)
    error = _relative(forward, inverse, 1e-300)
    return _result("inversion_symmetry", "symmetry", error < 1e-9, f"max relative error {error:.3e}",
                   "< 1e-09")


@register("symmetry")
def check_symmetrization_identity(context: CheckContext) -> CheckResult:
    """Geometric mean of the quadratic penalty at r and 1/r equals the barrier."""
    symmetrized = np.asarray(geometric_symmetrize(lambda r: (r - 1.0) ** 2, LOG_GRID))
    barrier = np.asarray(context.penalty(LOG_GRID), dtype=float)
    error = _relative(symmetrized, barrier, 1e-300)
    return _result("symmetrization_identity", "symmetry", error < 1e-12,
                   f"max relative error {error:.3e}", "< 1e-12")


@register("propositions")
def check_extinction_barrier(context: CheckContext) -> CheckResult:
    """With alpha=1 and A=-10 the objective keeps falling as r -> 0 and the slope explodes."""
    ratios = np.array([1e-2, 1e-4, 1e-6])
    objective = ratios * -10.0 - 1.0 * np.asarray(context.penalty(ratios), dtype=float)
    slope = mars_surrogate(1e-6, -10.0, 1.0).ratio_gradient
    decreasing = bool(np.all(np.diff(objective) < 0.0))
    return _result("extinction_barrier", "propositions", decreasing and slope > 1e11,
                   f"objective {objective.tolist()}, gradient at 1e-6 {slope:.3e}",
                   "strictly decreasing objective, gradient > 1e11")


@register("propositions")
def check_maspo_finite_extinction(_context: CheckContext) -> CheckResult:
    """The quadratic penalty stays finite as r -> 0."""
    coeff = maspo_coefficient(-1.0, 0.2)
    value = maspo_surrogate(1e-9, -1.0, coeff).objective
    error = abs(value - (-coeff))
    return _result("maspo_finite_extinction", "propositions", error < 1e-6,
                   f"objective {value!r} vs limit {-coeff!r}", "difference < 1e-06")


@register("propositions")
def check_no_truncation(context: CheckContext) -> CheckResult:
    """MARS gradients change sign at most once, at sqrt(alpha/(alpha - A))."""
    rng = context.rng(1)
    grid = np.logspace(-3.0, 3.0, 10000)
    problems = []
    for _ in range(100):
        adv = float(rng.uniform(-5.0, 5.0))
        alpha = float(rng.uniform(0.1, 10.0))
        gradient = mars_surrogate(grid, adv, alpha).ratio_gradient
        changes = np.flatnonzero(np.diff(np.sign(gradient)) != 0)
        stationary = mars_stationary_point(adv, alpha)
        runs = [run for run in truncation_region(lambda r, a=adv, w=alpha: mars_surrogate(r, a, w), grid)
                if run.num_points > 1]
        if changes.size > 1 or runs:
            problems.append(f"A={adv:.3f} alpha={alpha:.3f}: {changes.size} sign changes")
        elif changes.size == 1 and stationary is not None:
            index = changes[0]
            if not grid[index] <= stationary <= grid[index + 1]:
                problems.append(f"A={adv:.3f} alpha={alpha:.3f}: root {stationary:.4g} not bracketed")
    return _result("no_truncation", "propositions", not problems,
                   f"{len(problems)} failing pairs", "0 failing pairs", "; ".join(problems[:3]))


@register("propositions")
def check_clip_truncation(_context: CheckContext) -> CheckResult:
    """Clipping zeroes the gradient past the boundary in the improving direction."""
    grid = np.arange(0.05, 3.0 + 1e-9, 0.01)
    problems = []
    for adv, outside in ((1.0, grid > 1.2 + 1e-9), (-1.0, grid < 0.8 - 1e-9)):
        runs = truncation_region(lambda r, a=adv: mappo_surrogate(r, a, 0.2), grid)
        if len(runs) != 1:
            problems.append(f"A={adv}: {len(runs)} zero-gradient runs")
            continue
        covered = np.zeros(grid.size, dtype=bool)
        covered[runs[0].start_index:runs[0].stop_index + 1] = True
        if not np.all(covered[outside]) or np.any(covered & (np.abs(grid - 1.0) < 0.2 - 1e-9)):
            problems.append(f"A={adv}: run [{runs[0].r_start}, {runs[0].r_stop}] misplaced")
    return _result("clip_truncation", "propositions", not problems, "; ".join(problems) or "ok",
                   "one zero-gradient run exactly on the clipped side")


def _random_advantages(rng: np.random.Generator, count: int) -> np.ndarray:
    advantages = rng.uniform(-5.0, 5.0, count)
    advantages[advantages == 0.0] = 1.0
    return advantages


@register("calibration")
def check_target_stationarity(context: CheckContext) -> CheckResult:
    """The resolved surrogate is stationary at the selected target ratio."""
    advantages = _random_advantages(context.rng(2), 200)
    worst = 0.0
    specs = [TrustRegionSpec.create(v) for v in sorted(MARS_FAMILY, key=lambda v: v.value)]
    specs.append(TrustRegionSpec.create(Variant.MASPO_ASYMMETRIC))
    for spec in specs:
        targets = select_target(advantages, spec)
        gradient = np.asarray(resolve(spec, advantages)(targets).ratio_gradient)
        worst = max(worst, float(np.max(np.abs(gradient))))
    return _result("target_stationarity", "calibration", worst < 1e-9,
                   f"max |gradient at target| {worst:.3e}", "< 1e-09")


@register("calibration")
def check_additive_epsilon_recovery(context: CheckContext) -> CheckResult:
    """alpha_for_additive_epsilon is alpha_for_target at 1 + sign(A)*eps, bit for bit."""
    advantages = _random_advantages(context.rng(3), 200)
    mismatches = 0
    for eps in (0.1, 0.2, 0.5):
        direct = np.asarray(alpha_for_additive_epsilon(advantages, eps))
        targets = 1.0 + np.sign(advantages) * eps
        mismatches += int(np.count_nonzero(direct != np.asarray(alpha_for_target(advantages, targets))))
    return _result("additive_epsilon_recovery", "calibration", mismatches == 0,
                   f"{mismatches} mismatches", "0 mismatches")


@register("calibration")
def check_weight_sign(context: CheckContext) -> CheckResult:
    """Penalty weights are nonnegative for every advantage and its target."""
    advantages = _random_advantages(context.rng(4), 200)
    lowest = min(float(np.min(alpha_for_target(advantages, select_target(advantages, spec))))
                 for spec in (TrustRegionSpec.create(v) for v in MARS_FAMILY))
    return _result("weight_sign", "calibration", lowest >= 0.0, f"min alpha {lowest!r}", ">= 0")


@register("calibration")
def check_symmetric_bounds(_context: CheckContext) -> CheckResult:
    """Multiplicative bounds multiply to 1, additive bounds sum to 2."""
    problems = []
    for b in (1.05, 1.25, 1.5, 1.9):
        lower, upper = TrustRegionSpec.create(Variant.MARS_MULTIPLICATIVE_SYMMETRIC, b=b).resolved_bounds()
        if abs(lower * upper - 1.0) > 2.0 ** -52:
            problems.append(f"multiplicative b={b}: product {lower * upper!r}")
        lower, upper = TrustRegionSpec.create(Variant.MARS_ADDITIVE_SYMMETRIC, b=b).resolved_bounds()
        if lower + upper != 2.0:
            problems.append(f"additive b={b}: sum {lower + upper!r}")
    return _result("symmetric_bounds", "calibration", not problems, "; ".join(problems) or "ok",
                   "product 1 (within one ulp), sum exactly 2")


def _near_clip_boundary(spec: TrustRegionSpec, ratios: np.ndarray) -> np.ndarray:
    try:
        eps_lower, eps_upper = spec.clip_epsilons()
    except UnsupportedVariantException:
        return np.zeros(ratios.shape, dtype=bool)
    return (np.abs(ratios - (1.0 - eps_lower)) < KINK_EXCLUSION) | \
        (np.abs(ratios - (1.0 + eps_upper)) < KINK_EXCLUSION)


@register("gradients")
def check_surrogate_gradients(context: CheckContext) -> CheckResult:
    """Closed-form ratio gradients of every variant against central differences."""
    worst = 0.0
    for offset in range(GRADIENT_SEEDS):
        rng = context.rng(100 + offset)
        ratios = np.exp(rng.uniform(np.log(0.1), np.log(3.0), 50))
        for spec in default_specs():
            advantages = _random_advantages(rng, ratios.size)
            objective = resolve(spec, advantages)
            step = 1e-6 * np.maximum(1.0, ratios)
            numeric = (np.asarray(objective(ratios + step).objective)
                       - np.asarray(objective(ratios - step).objective)) / (2.0 * step)
            analytic = np.asarray(objective(ratios).ratio_gradient)
            keep = ~_near_clip_boundary(spec, ratios)
            if np.any(keep):
                worst = max(worst, _relative(analytic[keep], numeric[keep]))
    return _result("surrogate_gradients", "gradients", worst < SURROGATE_TOLERANCE,
                   f"max relative error {worst:.3e}", f"< {SURROGATE_TOLERANCE:g}")


@register("gradients")
def check_network_gradients(context: CheckContext) -> CheckResult:
    """Network plus policy-head parameter gradients against central differences."""
    worst = 0.0
    for offset in range(GRADIENT_SEEDS):
        rng = context.rng(200 + offset)
        for kind in (CATEGORICAL, GAUSSIAN):
            params = init_mlp(rng, 4, policy_output_dim(kind, 3), (6,), 1.0)
            inputs = rng.standard_normal((5, 4))
            output, _ = mlp_forward(params, inputs)
            policy = policy_from_output(output, kind)
            if kind == CATEGORICAL:
                actions = rng.integers(3, size=5)
            else:
                actions = policy.sample(rng.standard_normal(policy.mean.shape))
            weights = rng.standard_normal(5)

            def head_loss(vector, kind=kind, actions=actions, weights=weights, inputs=inputs):
                head = policy_from_output(mlp_forward(vector, inputs)[0], kind)
                return float(np.sum(weights * head.log_prob(actions)) + 0.3 * np.sum(head.entropy()))

            _, graph = mlp_forward(params, inputs)
            grads, _ = graph.backward(policy.output_gradient(actions, weights, np.full(5, 0.3)))
            worst = max(worst, gradient_error(grads.values, central_difference(head_loss, params)))
    return _result("network_gradients", "gradients", worst < LOSS_TOLERANCE,
                   f"max relative error {worst:.3e}", f"< {LOSS_TOLERANCE:g}")


def sample_minibatch(rng: np.random.Generator, params: ParameterVector, kind: str,
                     timesteps: int = 6, num_agents: int = 2, obs_dim: int = 4,
                     num_actions: int = 3, state_dim: int = 3) -> Minibatch:
    """Random minibatch whose behaviour log-probs sit near the current policy."""
    observations = rng.standard_normal((timesteps, num_agents, obs_dim))
    output, _ = mlp_forward(params, observations.reshape(-1, obs_dim))
    policy = policy_from_output(output, kind)
    if kind == CATEGORICAL:
        actions = rng.integers(num_actions, size=timesteps * num_agents)
    else:
        actions = policy.sample(rng.standard_normal(policy.mean.shape))
    old = policy.log_prob(actions).reshape(timesteps, num_agents)
    old = old + rng.normal(0.0, 0.15, old.shape)
    return Minibatch(observations=observations,
                     actions=actions.reshape((timesteps, num_agents) + actions.shape[1:]),
                     old_log_probs=old, advantages=rng.standard_normal(timesteps),
                     returns=rng.standard_normal(timesteps),
                     old_values=rng.normal(0.0, 0.5, timesteps),
                     states=rng.standard_normal((timesteps, state_dim)))


@register("gradients")
def check_actor_loss_gradients(context: CheckContext) -> CheckResult:
    """Actor-loss parameter gradients of every variant against central differences."""
    worst = 0.0
    failing = []
    for offset in range(GRADIENT_SEEDS):
        rng = context.rng(300 + offset)
        for kind in (CATEGORICAL, GAUSSIAN):
            params = init_mlp(rng, 4, policy_output_dim(kind, 3), (6,), 1.0)
            batch = sample_minibatch(rng, params, kind)
            for spec in default_specs():
                analytic = actor_loss(batch, params, spec, 0.01, kind).grads.values
                numeric = central_difference(
                    lambda p, s=spec, k=kind: actor_loss(batch, p, s, 0.01, k).loss, params)
                error = gradient_error(analytic, numeric)
                if error >= LOSS_TOLERANCE:
                    failing.append(f"{spec.variant.value}/{kind}/seed offset {offset}")
                worst = max(worst, error)
    return _result("actor_loss_gradients", "gradients", not failing,
                   f"max relative error {worst:.3e}", f"< {LOSS_TOLERANCE:g}", "; ".join(failing[:3]))


@register("gradients")
def check_critic_loss_gradients(context: CheckContext) -> CheckResult:
    """Clipped-value critic gradients against central differences."""
    worst = 0.0
    for offset in range(GRADIENT_SEEDS):
        rng = context.rng(400 + offset)
        params = init_mlp(rng, 3, 1, (6,), 1.0)
        batch = sample_minibatch(rng, init_mlp(rng, 4, 3, (6,), 1.0), CATEGORICAL)
        analytic = critic_loss(batch, params, 0.2).grads.values
        numeric = central_difference(lambda p: critic_loss(batch, p, 0.2).loss, params)
        worst = max(worst, gradient_error(analytic, numeric))
    return _result("critic_loss_gradients", "gradients", worst < LOSS_TOLERANCE,
                   f"max relative error {worst:.3e}", f"< {LOSS_TOLERANCE:g}")


def run_suite(suite: str = "all", seed: int = 0,
              penalty_override: Optional[Penalty] = None) -> VerificationReport:
    """
    Runs one suite, or every suite for 'all'.

    A check that raises a package exception counts as failed.

    Raises:
        UnsupportedVariantException: on an unknown suite name.
    """
    if suite == "all":
        names = SUITES
    elif suite in CHECKS:
        names = (suite,)
    else:
        raise UnsupportedVariantException(
            f"Unknown suite '{suite}': must be one of {', '.join(SUITES + ('all',))}")
    context = CheckContext(seed, penalty_override or mars_penalty)
    report = VerificationReport(seed)
    for name in names:
        for check in CHECKS[name]:
            try:
                result = check(context)
            except RatioObjectiveException as exc:
                result = _result(check.__name__.replace("check_", ""), name, False,
                                 f"{type(exc).__name__}: {exc.message}", "no error")
            report.checks.append(result)
            level = logging.INFO if result.passed else logging.ERROR
            logger.log(level, "%s/%s: %s (%s)", result.suite, result.name,
                       "pass" if result.passed else "FAIL", result.observed)
    return report
