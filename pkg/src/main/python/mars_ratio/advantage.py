"""
Generalized advantage estimation over rollouts.

Advantages are joint quantities: one value per timestep, shared by every
agent acting at that timestep.
"""

from dataclasses import dataclass

import numpy as np

from mars_ratio.ratio_objective_exception import InvalidInputException

DEFAULT_GAMMA = 0.99
DEFAULT_GAE_LAMBDA = 0.95
NORMALIZATION_EPSILON = 1e-8


def _finite(array: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise InvalidInputException(f"Invalid {name}: values must be finite")
    return array


@dataclass(frozen=True)
class RolloutBatch:
    """
    One environment instance's trajectory segment of length T.

    Attributes:
        observations: (T, num_agents, obs_dim) local observations.
        actions: (T, num_agents) categorical or (T, num_agents, act_dim) continuous.
        old_log_probs: (T, num_agents) behaviour-policy log-probabilities.
        rewards: (T,) shared team reward.
        dones: (T,) episode-termination flags.
        values: (T,) critic values V(s_t).
        bootstrap_value: V(s_T) for the state after the last step.
        states: (T, state_dim) global states.
    """
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    bootstrap_value: float
    states: np.ndarray

    def __post_init__(self):
        horizon = np.shape(self.rewards)[0] if np.ndim(self.rewards) == 1 else -1
        if horizon < 1:
            raise InvalidInputException("Invalid rollout: rewards must be a non-empty vector")
        for name in ("observations", "actions", "old_log_probs", "dones", "values", "states"):
            if np.shape(getattr(self, name))[:1] != (horizon,):
                raise InvalidInputException(
                    f"Invalid rollout: {name} does not share the horizon length {horizon}")
        _finite(np.asarray(self.rewards, dtype=float), "rewards")
        _finite(np.asarray(self.values, dtype=float), "values")
        _finite(np.asarray(self.old_log_probs, dtype=float), "old log-probabilities")
        _finite(np.asarray(self.bootstrap_value, dtype=float), "bootstrap value")
        if np.asarray(self.dones).dtype != np.bool_:
            raise InvalidInputException("Invalid rollout: dones must be boolean flags")

    @property
    def horizon(self) -> int:
        """Number of timesteps T."""
        return int(np.shape(self.rewards)[0])


@dataclass(frozen=True)
class AdvantageSet:
    """Per-timestep advantages and value targets, returns = advantages + values."""
    advantages: np.ndarray
    returns: np.ndarray


def gae_from_arrays(rewards, values, dones, bootstrap_value: float,
                    gamma: float = DEFAULT_GAMMA,
                    gae_lambda: float = DEFAULT_GAE_LAMBDA) -> AdvantageSet:
    """
    Backward GAE recursion on raw arrays.

    delta_t = r_t + gamma*(1 - done_t)*V_{t+1} - V_t
    A_t = delta_t + gamma*lambda*(1 - done_t)*A_{t+1}, with A_T = 0.

    Raises:
        InvalidInputException: on non-finite inputs or out-of-range gamma/lambda.
    """
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputException("Invalid gamma: must lie in (0, 1]")
    if not 0.0 <= gae_lambda <= 1.0:
        raise InvalidInputException("Invalid lambda: must lie in [0, 1]")
    rewards = _finite(np.asarray(rewards, dtype=float), "rewards")
    values = _finite(np.asarray(values, dtype=float), "values")
    bootstrap = float(_finite(np.asarray(bootstrap_value, dtype=float), "bootstrap value"))
    masks = 1.0 - np.asarray(dones, dtype=float)
    if not rewards.shape == values.shape == masks.shape or rewards.ndim != 1:
        raise InvalidInputException("Invalid rollout: rewards, values and dones must align")
    next_values = np.append(values[1:], bootstrap)
    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(rewards.size)):
        delta = rewards[t] + gamma * masks[t] * next_values[t] - values[t]
        running = delta + gamma * gae_lambda * masks[t] * running
        advantages[t] = running
    return AdvantageSet(advantages, advantages + values)


def compute_gae(batch: RolloutBatch, gamma: float = DEFAULT_GAMMA,
                gae_lambda: float = DEFAULT_GAE_LAMBDA) -> AdvantageSet:
    """
    Joint advantages and value targets for one rollout.

    Args:
        batch: the rollout.
        gamma: discount factor in (0, 1].
        gae_lambda: GAE lambda in [0, 1].

    Returns:
        AdvantageSet: advantages and returns of length T.
    """
    return gae_from_arrays(batch.rewards, batch.values, batch.dones,
                           batch.bootstrap_value, gamma, gae_lambda)


def normalize_advantages(adv: AdvantageSet, enabled: bool) -> AdvantageSet:
    """
    Shifts and scales advantages to zero mean and unit standard deviation.

    Returns are never renormalized. A zero-variance batch normalizes to zeros.

    Raises:
        InvalidInputException: if enabled on fewer than 2 timesteps.
    """
    if not enabled:
        return adv
    values = np.asarray(adv.advantages, dtype=float)
    if values.size < 2:
        raise InvalidInputException("Advantage normalization needs at least 2 timesteps")
    normalized = (values - values.mean()) / (values.std() + NORMALIZATION_EPSILON)
    return AdvantageSet(normalized, adv.returns)
