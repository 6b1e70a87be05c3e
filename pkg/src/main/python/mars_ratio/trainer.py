"""
Centralized-training / decentralized-execution training loop.

Actors act on local observations with one set of shared parameters; a
centralized critic scores the global state. Each update collects a rollout
from update_batch_size environment instances, computes joint GAE
advantages, then runs num_epochs passes of num_minibatches minibatches over
the selected ratio surrogate with an entropy bonus and a clipped-value
critic regression.

Everything draws from one seeded generator and steps environments in a
fixed order, so a (config, seed) pair always yields the same diagnostics.
"""

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from mars_ratio.advantage import AdvantageSet, RolloutBatch, compute_gae, normalize_advantages
from mars_ratio.approximator import (ACTOR_OUTPUT_GAIN, CATEGORICAL, CRITIC_OUTPUT_GAIN,
                                     AdamState, GradientAccumulator, ParameterVector, adam_step,
                                     categorical_head, clip_global_norm, init_mlp, mlp_forward,
                                     policy_from_output, policy_output_dim, save_checkpoint)
from mars_ratio.envs import CooperativeEnv, make_env
from mars_ratio.objective_core import log_ratio_clamped, ratio_from_log_probs
from mars_ratio.ratio_objective_exception import (ConfigValidationException,
                                                  NumericInstabilityException,
                                                  RatioObjectiveException)
from mars_ratio.trust_region import TrustRegionSpec, Variant, resolve

logger = logging.getLogger(__name__)

EVALUATION_STREAM = 7919
SEED_BOUND = 2 ** 31 - 1
FINAL_FRACTION = 0.2
COLLAPSE_ADVANTAGE = -20.0
COLLAPSE_CALIBRATION = -1.0

TRAINER_FIELDS = ("actor_lr", "critic_lr", "entropy_coeff", "value_clip_eps", "num_minibatches",
                  "num_epochs", "rollout_length", "update_batch_size", "gamma", "gae_lambda",
                  "max_grad_norm", "value_coeff", "advantage_normalization", "seed",
                  "total_timesteps", "hidden_sizes", "agent_id_encoding", "eval_interval",
                  "eval_episodes", "min_ratio_gate")


def _default_trust_region() -> TrustRegionSpec:
    return TrustRegionSpec.create(Variant.MARS)


@dataclass(frozen=True)
class TrainConfig:
    """
    Every knob of a training run.

    Defaults follow the fixed hyperparameters of the reference setup (rollout
    128, gamma 0.99, lambda 0.95, max grad norm 0.5, value coefficient 0.5,
    update batch size 2, agent ID encoding, no learning-rate decay).
    """
    trust_region: TrustRegionSpec = field(default_factory=_default_trust_region)
    env_name: str = "matrix_game"
    env_params: Mapping[str, Any] = field(default_factory=dict)
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    entropy_coeff: float = 0.01
    value_clip_eps: float = 0.2
    num_minibatches: int = 2
    num_epochs: int = 4
    rollout_length: int = 128
    update_batch_size: int = 2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    max_grad_norm: float = 0.5
    value_coeff: float = 0.5
    advantage_normalization: bool = True
    seed: int = 0
    total_timesteps: int = 128 * 2 * 300
    hidden_sizes: Tuple[int, ...] = (64, 64)
    agent_id_encoding: bool = True
    eval_interval: int = 10
    eval_episodes: int = 32
    min_ratio_gate: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "env_params", dict(self.env_params))
        positive = ("actor_lr", "critic_lr", "value_clip_eps", "max_grad_norm", "num_minibatches",
                    "num_epochs", "rollout_length", "update_batch_size", "total_timesteps",
                    "eval_interval", "eval_episodes", "min_ratio_gate")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigValidationException(f"Invalid trainer.{name}: must be > 0")
        for name in ("entropy_coeff", "value_coeff"):
            if not getattr(self, name) >= 0:
                raise ConfigValidationException(f"Invalid trainer.{name}: must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigValidationException("Invalid trainer.gamma: must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigValidationException("Invalid trainer.gae_lambda: must lie in [0, 1]")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigValidationException("Invalid trainer.hidden_sizes: widths must be >= 1")
        if self.num_minibatches > self.rollout_length * self.update_batch_size:
            raise ConfigValidationException(
                "Invalid trainer.num_minibatches: more minibatches than timesteps per update")
        if self.total_timesteps < self.steps_per_update:
            raise ConfigValidationException(
                "Invalid trainer.total_timesteps: must cover at least one update "
                f"({self.steps_per_update} steps)")

    @property
    def steps_per_update(self) -> int:
        """Environment steps collected per update."""
        return self.rollout_length * self.update_batch_size

    @property
    def num_updates(self) -> int:
        """Number of updates total_timesteps buys."""
        return self.total_timesteps // self.steps_per_update

    def make_env(self) -> CooperativeEnv:
        """Builds one environment instance for this run."""
        try:
            return make_env(self.env_name, agent_id_encoding=self.agent_id_encoding,
                            **self.env_params)
        except RatioObjectiveException as exc:
            raise ConfigValidationException(f"Invalid env: {exc.message}") from exc

    def to_dict(self) -> Dict:
        """Nested dictionary in the run-config file layout."""
        trainer = {name: getattr(self, name) for name in TRAINER_FIELDS}
        trainer["hidden_sizes"] = list(self.hidden_sizes)
        env = {"name": self.env_name}
        env.update(self.env_params)
        return {"trust_region": self.trust_region.to_dict(), "trainer": trainer, "env": env}


def canonical_config_json(config: TrainConfig) -> str:
    """Canonical serialized form: sorted keys, no whitespace."""
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(config: TrainConfig) -> str:
    """SHA-256 of the canonical serialized config."""
    return hashlib.sha256(canonical_config_json(config).encode()).hexdigest()


@dataclass(frozen=True)
class DiagnosticsRecord:
    """Telemetry of one update."""
    update: int
    env_steps: int
    mean_episode_return: Optional[float]
    eval_return: Optional[float]
    actor_loss: float
    critic_loss: float
    entropy: float
    min_ratio: float
    max_ratio: float
    mean_abs_advantage: float
    actor_grad_norm: float
    critic_grad_norm: float


DIAGNOSTIC_COLUMNS = tuple(f.name for f in dataclasses.fields(DiagnosticsRecord))
_INTEGER_COLUMNS = ("update", "env_steps")


def write_diagnostics_csv(path: str, records: Sequence[DiagnosticsRecord]):
    """One row per update, header first, columns in DIAGNOSTIC_COLUMNS order."""
    with open(path, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(DIAGNOSTIC_COLUMNS)
        for record in records:
            row = []
            for name in DIAGNOSTIC_COLUMNS:
                value = getattr(record, name)
                if value is None:
                    row.append("")
                elif name in _INTEGER_COLUMNS:
                    row.append(str(int(value)))
                else:
                    row.append(repr(float(value)))
            writer.writerow(row)


def load_diagnostics(path: str) -> List[DiagnosticsRecord]:
    """
    Reads a diagnostics CSV back into records.

    Raises:
        ConfigValidationException: if the file is missing or its columns differ.
    """
    if not os.path.exists(path):
        raise ConfigValidationException(f"Diagnostics file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as file:
        reader = csv.reader(file)
        header = next(reader, None)
        if header is None or tuple(header) != DIAGNOSTIC_COLUMNS:
            raise ConfigValidationException(f"Invalid diagnostics header in {path}")
        records = []
        for row in reader:
            values = {}
            for name, cell in zip(DIAGNOSTIC_COLUMNS, row):
                if cell == "":
                    values[name] = None
                elif name in _INTEGER_COLUMNS:
                    values[name] = int(cell)
                else:
                    values[name] = float(cell)
            records.append(DiagnosticsRecord(**values))
    return records


@dataclass(frozen=True)
class Minibatch:
    """A set of timesteps with every agent of each timestep kept together."""
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    old_values: np.ndarray
    states: np.ndarray

    @property
    def size(self) -> int:
        """Number of timesteps."""
        return int(self.advantages.shape[0])

    def take(self, index) -> "Minibatch":
        """Sub-batch of the given timestep indices."""
        return Minibatch(*(getattr(self, f.name)[index] for f in dataclasses.fields(self)))

    @classmethod
    def from_rollouts(cls, batches: Sequence[RolloutBatch], advantages: AdvantageSet) -> "Minibatch":
        """Concatenates rollouts (in order) with their already-computed advantages."""
        return cls(
            observations=np.concatenate([b.observations for b in batches]),
            actions=np.concatenate([b.actions for b in batches]),
            old_log_probs=np.concatenate([b.old_log_probs for b in batches]),
            advantages=np.asarray(advantages.advantages, dtype=float),
            returns=np.asarray(advantages.returns, dtype=float),
            old_values=np.concatenate([b.values for b in batches]),
            states=np.concatenate([b.states for b in batches]),
        )


@dataclass(frozen=True)
class ActorLossResult:
    """Actor loss, its parameter gradient and ratio statistics."""
    loss: float
    grads: GradientAccumulator
    min_ratio: float
    max_ratio: float
    entropy: float


@dataclass(frozen=True)
class CriticLossResult:
    """Critic loss and its parameter gradient."""
    loss: float
    grads: GradientAccumulator


def actor_loss(batch: Minibatch, params: ParameterVector, spec: TrustRegionSpec, beta: float,
               action_kind: str = CATEGORICAL) -> ActorLossResult:
    """
    Negated mean surrogate minus the entropy bonus.

    Ratios are recomputed from the current parameters; the per-sample
    surrogate is resolved from the stored (constant) joint advantage, so the
    penalty weight is data, not a function of the parameters. The mean runs
    over agents and timesteps.

    Args:
        batch: timesteps with observations, actions, old log-probs and advantages.
        params: shared actor parameters.
        spec: trust-region variant.
        beta: entropy coefficient.
        action_kind: policy head of the actor.

    Returns:
        ActorLossResult: loss, gradient and ratio statistics.

    Raises:
        NumericInstabilityException: if the loss is not finite.
    """
    timesteps, num_agents = batch.old_log_probs.shape
    count = timesteps * num_agents
    observations = batch.observations.reshape(count, -1)
    actions = batch.actions.reshape((count,) + batch.actions.shape[2:])
    output, context = mlp_forward(params, observations)
    policy = policy_from_output(output, action_kind)
    log_probs = policy.log_prob(actions).reshape(timesteps, num_agents)
    ratios = np.asarray(ratio_from_log_probs(log_probs, batch.old_log_probs))
    joint = np.broadcast_to(batch.advantages[:, None], ratios.shape)
    evaluation = resolve(spec, joint)(ratios)
    entropy = policy.entropy()
    loss = -float(np.mean(evaluation.objective)) - beta * float(np.mean(entropy))
    if not math.isfinite(loss):
        raise NumericInstabilityException(
            "Non-finite actor loss",
            {"actor_loss": repr(loss), "min_ratio": float(ratios.min()),
             "max_ratio": float(ratios.max())})
    live = ~np.asarray(log_ratio_clamped(log_probs, batch.old_log_probs))
    d_log_probs = -np.asarray(evaluation.ratio_gradient) * ratios * live / count
    d_entropy = np.full(count, -beta / count)
    d_output = policy.output_gradient(actions, d_log_probs.ravel(), d_entropy)
    grads, _ = context.backward(d_output)
    return ActorLossResult(loss, grads, float(ratios.min()), float(ratios.max()),
                           float(np.mean(entropy)))


def critic_loss(batch: Minibatch, params: ParameterVector, value_clip_eps: float,
                value_coeff: float = 0.5) -> CriticLossResult:
    """
    Clipped-value regression onto the GAE returns.

    loss = value_coeff * mean(max((V - R)^2, (V_old + clip(V - V_old, -eps, eps) - R)^2))

    Raises:
        NumericInstabilityException: if the loss is not finite.
    """
    output, context = mlp_forward(params, batch.states)
    values = output[:, 0]
    error = values - batch.returns
    shift = values - batch.old_values
    clipped_values = batch.old_values + np.clip(shift, -value_clip_eps, value_clip_eps)
    clipped_error = clipped_values - batch.returns
    unclipped_sq = error * error
    clipped_sq = clipped_error * clipped_error
    use_unclipped = unclipped_sq >= clipped_sq
    loss = value_coeff * float(np.mean(np.maximum(unclipped_sq, clipped_sq)))
    if not math.isfinite(loss):
        raise NumericInstabilityException("Non-finite critic loss", {"critic_loss": repr(loss)})
    inside = np.abs(shift) < value_clip_eps
    d_values = np.where(use_unclipped, error, clipped_error * inside)
    d_values = value_coeff * 2.0 * d_values / values.size
    grads, _ = context.backward(d_values[:, None])
    return CriticLossResult(loss, grads)


@dataclass
class TrainingResult:
    """Diagnostics series and final parameters of a run."""
    config: TrainConfig
    diagnostics: List[DiagnosticsRecord]
    actor: ParameterVector
    critic: ParameterVector

    def evaluation_points(self) -> List[Tuple[int, float]]:
        """(env_steps, eval_return) for every evaluated update."""
        return [(r.env_steps, r.eval_return) for r in self.diagnostics if r.eval_return is not None]

    def summary(self) -> Dict:
        """Final and final-20% evaluation returns plus ratio extremes."""
        points = [value for _, value in self.evaluation_points()]
        tail = points[-max(1, math.ceil(FINAL_FRACTION * len(points))):] if points else []
        min_ratio = min((r.min_ratio for r in self.diagnostics), default=None)
        variant = self.config.trust_region.variant
        gate = None
        if variant.is_mars_family and min_ratio is not None:
            gate = min_ratio >= self.config.min_ratio_gate
        return {
            "variant": variant.value,
            "env": self.config.env_name,
            "seed": self.config.seed,
            "num_updates": len(self.diagnostics),
            "env_steps": self.diagnostics[-1].env_steps if self.diagnostics else 0,
            "final_eval_return": points[-1] if points else None,
            "final_20pct_eval_return": float(np.mean(tail)) if tail else None,
            "min_ratio": min_ratio,
            "max_ratio": max((r.max_ratio for r in self.diagnostics), default=None),
            "ratio_gate_passed": gate,
            "config_hash": config_hash(self.config),
        }


def sample_actions(params: ParameterVector, observations: np.ndarray, action_kind: str,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Samples one action per observation row from the stochastic policy.

    Returns:
        tuple: (actions, log-probabilities).
    """
    output, _ = mlp_forward(params, observations)
    policy = policy_from_output(output, action_kind)
    if action_kind == CATEGORICAL:
        actions = policy.sample(rng.random(observations.shape[0]))
    else:
        actions = policy.sample(rng.standard_normal(policy.mean.shape))
    return actions, policy.log_prob(actions)


class CtdeTrainer:
    """Owns the parameters, optimizer state, environments and generator of one run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.envs = [config.make_env() for _ in range(config.update_batch_size)]
        env_spec = self.envs[0].spec
        self.env_spec = env_spec
        self.action_kind = env_spec.action_space.kind
        output_dim = policy_output_dim(self.action_kind, env_spec.action_space.dim)
        self.actor = init_mlp(self.rng, env_spec.observation_dim, output_dim,
                              config.hidden_sizes, ACTOR_OUTPUT_GAIN)
        self.critic = init_mlp(self.rng, env_spec.state_dim, 1,
                               config.hidden_sizes, CRITIC_OUTPUT_GAIN)
        self.actor_state = AdamState.zeros(self.actor)
        self.critic_state = AdamState.zeros(self.critic)
        self.current = [env.reset(self.__next_seed()) for env in self.envs]
        self.running_returns = np.zeros(len(self.envs))
        self.env_steps = 0
        self.diagnostics: List[DiagnosticsRecord] = []

    def __next_seed(self) -> int:
        return int(self.rng.integers(SEED_BOUND))

    def values(self, states: np.ndarray) -> np.ndarray:
        """Critic values of a batch of global states."""
        output, _ = mlp_forward(self.critic, states)
        return output[:, 0]

    def collect_rollout(self) -> Tuple[List[RolloutBatch], List[float]]:
        """
        Steps every environment rollout_length times.

        Returns:
            tuple: (one RolloutBatch per environment, returns of the episodes
            that finished during the rollout).
        """
        num_envs = len(self.envs)
        num_agents = self.env_spec.num_agents
        columns = {name: [] for name in ("obs", "actions", "logp", "rewards", "dones",
                                         "values", "states")}
        completed = []
        for _ in range(self.config.rollout_length):
            observations = np.stack([step.observations for step in self.current])
            states = np.stack([step.state for step in self.current])
            flat = observations.reshape(num_envs * num_agents, -1)
            actions, log_probs = sample_actions(self.actor, flat, self.action_kind, self.rng)
            actions = actions.reshape((num_envs, num_agents) + actions.shape[1:])
            values = self.values(states)
            rewards = np.zeros(num_envs)
            dones = np.zeros(num_envs, dtype=bool)
            for index, env in enumerate(self.envs):
                step = env.step(actions[index])
                rewards[index] = step.reward
                dones[index] = step.done
                self.running_returns[index] += step.reward
                if step.done:
                    completed.append(float(self.running_returns[index]))
                    self.running_returns[index] = 0.0
                    step = env.reset(self.__next_seed())
                self.current[index] = step
            columns["obs"].append(observations)
            columns["actions"].append(actions)
            columns["logp"].append(log_probs.reshape(num_envs, num_agents))
            columns["rewards"].append(rewards)
            columns["dones"].append(dones)
            columns["values"].append(values)
            columns["states"].append(states)
        stacked = {name: np.stack(column, axis=1) for name, column in columns.items()}
        bootstrap = self.values(np.stack([step.state for step in self.current]))
        self.env_steps += num_envs * self.config.rollout_length
        batches = [RolloutBatch(stacked["obs"][e], stacked["actions"][e], stacked["logp"][e],
                                stacked["rewards"][e], stacked["dones"][e], stacked["values"][e],
                                float(bootstrap[e]), stacked["states"][e])
                   for e in range(num_envs)]
        return batches, completed

    def update(self, batches: Sequence[RolloutBatch], update_index: int) -> Dict[str, float]:
        """Advantage estimation followed by the epoch/minibatch optimization loop."""
        config = self.config
        sets = [compute_gae(batch, config.gamma, config.gae_lambda) for batch in batches]
        raw = AdvantageSet(np.concatenate([s.advantages for s in sets]),
                           np.concatenate([s.returns for s in sets]))
        data = Minibatch.from_rollouts(batches, normalize_advantages(raw, config.advantage_normalization))
        stats = {"actor_loss": [], "critic_loss": [], "entropy": [], "actor_grad_norm": [],
                 "critic_grad_norm": []}
        min_ratio, max_ratio = math.inf, -math.inf
        for epoch in range(config.num_epochs):
            order = self.rng.permutation(data.size)
            for index in np.array_split(order, config.num_minibatches):
                minibatch = data.take(index)
                try:
                    actor = actor_loss(minibatch, self.actor, config.trust_region,
                                       config.entropy_coeff, self.action_kind)
                    critic = critic_loss(minibatch, self.critic, config.value_clip_eps,
                                         config.value_coeff)
                except NumericInstabilityException as exc:
                    exc.diagnostics.update({"update": update_index, "epoch": epoch,
                                            "env_steps": self.env_steps})
                    raise
                actor_grads, actor_norm = clip_global_norm(actor.grads, config.max_grad_norm)
                critic_grads, critic_norm = clip_global_norm(critic.grads, config.max_grad_norm)
                self.actor, self.actor_state = adam_step(self.actor, actor_grads,
                                                         self.actor_state, config.actor_lr)
                self.critic, self.critic_state = adam_step(self.critic, critic_grads,
                                                           self.critic_state, config.critic_lr)
                stats["actor_loss"].append(actor.loss)
                stats["critic_loss"].append(critic.loss)
                stats["entropy"].append(actor.entropy)
                stats["actor_grad_norm"].append(actor_norm)
                stats["critic_grad_norm"].append(critic_norm)
                min_ratio = min(min_ratio, actor.min_ratio)
                max_ratio = max(max_ratio, actor.max_ratio)
        summary = {name: float(np.mean(values)) for name, values in stats.items()}
        summary.update(min_ratio=min_ratio, max_ratio=max_ratio,
                       mean_abs_advantage=float(np.mean(np.abs(raw.advantages))))
        return summary

    def evaluate(self, update_index: int) -> float:
        """Mean return of eval_episodes stochastic-policy episodes on fresh environments."""
        rng = np.random.default_rng([self.config.seed, EVALUATION_STREAM, update_index])
        envs = [self.config.make_env() for _ in range(self.config.eval_episodes)]
        current = [env.reset(int(rng.integers(SEED_BOUND))) for env in envs]
        returns = np.zeros(len(envs))
        active = np.ones(len(envs), dtype=bool)
        num_agents = self.env_spec.num_agents
        while active.any():
            live = np.flatnonzero(active)
            observations = np.stack([current[i].observations for i in live])
            actions, _ = sample_actions(self.actor, observations.reshape(live.size * num_agents, -1),
                                        self.action_kind, rng)
            actions = actions.reshape((live.size, num_agents) + actions.shape[1:])
            for row, index in enumerate(live):
                step = envs[index].step(actions[row])
                returns[index] += step.reward
                current[index] = step
                if step.done:
                    active[index] = False
        return float(returns.mean())

    def train(self) -> TrainingResult:
        """Runs every update of the configured budget."""
        config = self.config
        num_updates = config.num_updates
        logger.info("Training %s on %s for %d updates (seed %d, advantage normalization %s)",
                    config.trust_region.variant.value, config.env_name, num_updates, config.seed,
                    "on" if config.advantage_normalization else "off")
        for update_index in range(1, num_updates + 1):
            batches, completed = self.collect_rollout()
            stats = self.update(batches, update_index)
            evaluate = update_index % config.eval_interval == 0 or update_index == num_updates
            eval_return = self.evaluate(update_index) if evaluate else None
            record = DiagnosticsRecord(
                update=update_index, env_steps=self.env_steps,
                mean_episode_return=float(np.mean(completed)) if completed else None,
                eval_return=eval_return, **stats)
            self.diagnostics.append(record)
            logger.info("update %d steps %d eval %s ratio [%.4g, %.4g]", update_index,
                        self.env_steps, "-" if eval_return is None else f"{eval_return:.4f}",
                        record.min_ratio, record.max_ratio)
            if config.trust_region.variant.is_mars_family and record.min_ratio < config.min_ratio_gate:
                logger.warning("update %d: min ratio %.3g fell below the %.3g gate",
                               update_index, record.min_ratio, config.min_ratio_gate)
        return TrainingResult(config, list(self.diagnostics), self.actor, self.critic)


def write_run_artifact(out_dir: str, result: TrainingResult):
    """Writes config.json, diagnostics.csv, checkpoint.json and summary.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as file:
        file.write(canonical_config_json(result.config) + "\n")
    write_diagnostics_csv(os.path.join(out_dir, "diagnostics.csv"), result.diagnostics)
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"),
                    {"actor": result.actor, "critic": result.critic},
                    {"config_hash": config_hash(result.config),
                     "num_updates": len(result.diagnostics)})
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as file:
        json.dump(result.summary(), file, indent=4, sort_keys=True)


def run_training(config: TrainConfig, out_dir: Optional[str] = None) -> TrainingResult:
    """
    Trains with the given config and optionally writes the run artifact.

    A non-finite loss aborts the run; its diagnostics go to failure.json
    in out_dir before the exception propagates.
    """
    trainer = CtdeTrainer(config)
    try:
        result = trainer.train()
    except NumericInstabilityException as exc:
        logger.error("Run aborted: %s %s", exc.message, exc.diagnostics)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "failure.json"), "w", encoding="utf-8") as file:
                json.dump({"message": exc.message, "diagnostics": exc.diagnostics}, file,
                          indent=4, sort_keys=True, default=str)
        raise
    if out_dir is not None:
        write_run_artifact(out_dir, result)
    return result


@dataclass(frozen=True)
class ProbeResult:
    """Target-action probability after every gradient step of collapse_probe."""
    spec: TrustRegionSpec
    advantage: float
    calibration: Optional[float]
    epochs_per_update: Optional[int]
    probabilities: np.ndarray
    update_ratios: np.ndarray

    @property
    def final_probability(self) -> float:
        """Probability after the last step."""
        return float(self.probabilities[-1])

    @property
    def ratio_floor(self) -> float:
        """Smallest ratio any single update reached before pi_old was refreshed."""
        return float(self.update_ratios.min()) if self.update_ratios.size else 1.0

    def to_dict(self) -> Dict:
        """JSON-ready description."""
        return {
            "trust_region": self.spec.to_dict(),
            "advantage": self.advantage,
            "calibration": self.calibration,
            "epochs_per_update": self.epochs_per_update,
            "final_probability": self.final_probability,
            "ratio_floor": self.ratio_floor,
            "probabilities": [float(p) for p in self.probabilities],
            "update_ratios": [float(r) for r in self.update_ratios],
        }


def collapse_probe(spec: TrustRegionSpec, steps: int = 500, learning_rate: float = 0.05,
                   advantage: float = COLLAPSE_ADVANTAGE,
                   calibration: Optional[float] = COLLAPSE_CALIBRATION, num_actions: int = 4,
                   target_action: int = 0,
                   epochs_per_update: Optional[int] = None) -> ProbeResult:
    """
    Single-state bandit driven only by the resolved surrogate.

    One action receives the same injected advantage at every step while the
    penalty weight and coefficients are calibrated at `calibration` (the
    advantage scale the trust region was set for; None calibrates at the
    injected advantage). The softmax logits take plain gradient-ascent steps
    on the surrogate. pi_old stays fixed for the whole run unless
    epochs_per_update is given, in which case it is refreshed that often.

    With the defaults the quadratic penalty's optimum for the outlier lies at
    r <= 0, so its target probability keeps falling, while the barrier holds
    the ratio at sqrt(alpha / (alpha - A)).

    Returns:
        ProbeResult: probabilities (steps + 1 entries) and per-update ratios.
    """
    refresh = steps if epochs_per_update is None else epochs_per_update
    if steps < 1 or refresh < 1 or not learning_rate > 0.0:
        raise ConfigValidationException("Invalid probe: steps, epochs and lr must be positive")
    logits = np.zeros(num_actions)
    objective = resolve(spec, advantage, calibration)
    probabilities = [categorical_head(logits).probs[target_action]]
    update_ratios = []
    old_log_prob = None
    ratio = 1.0
    for step in range(steps):
        if step % refresh == 0:
            if old_log_prob is not None:
                update_ratios.append(ratio)
            old_log_prob = float(categorical_head(logits).log_prob(target_action))
        policy = categorical_head(logits)
        ratio = ratio_from_log_probs(float(policy.log_prob(target_action)), old_log_prob)
        gradient = objective(ratio).ratio_gradient
        logits = logits + learning_rate * policy.output_gradient(target_action, gradient * ratio, 0.0)
        probabilities.append(categorical_head(logits).probs[target_action])
        ratio = ratio_from_log_probs(float(categorical_head(logits).log_prob(target_action)),
                                     old_log_prob)
    update_ratios.append(ratio)
    return ProbeResult(spec, float(advantage), None if calibration is None else float(calibration),
                       epochs_per_update, np.array(probabilities), np.array(update_ratios))
