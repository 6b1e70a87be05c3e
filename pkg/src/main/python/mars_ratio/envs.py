"""
Tiny cooperative environments behind one interface.

    - MatrixGame: one-step coordination game, reward 1 when every agent
      picks a different action.
    - ForageGrid: 7x7 walled gridworld where agents eat dots for a shared
      reward, with a per-step team penalty and a local 5x5 view.
    - ContinuousGame: one-step game with real-valued actions, for the
      Gaussian policy head.

All are deterministic given the reset seed and the joint actions.
"""

import hashlib
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from mars_ratio.ratio_objective_exception import InvalidInputException

logger = logging.getLogger(__name__)

FORAGE_DOT_REWARD = 1.0
FORAGE_STEP_PENALTY = -0.025
FORAGE_EPISODE_LENGTH = 64
FORAGE_VIEW_RADIUS = 2
FORAGE_NUM_ACTIONS = 5
ACTION_UP, ACTION_DOWN, ACTION_LEFT, ACTION_RIGHT, ACTION_EAT = range(FORAGE_NUM_ACTIONS)
MOVES = {ACTION_UP: (-1, 0), ACTION_DOWN: (1, 0), ACTION_LEFT: (0, -1), ACTION_RIGHT: (0, 1)}
CONTINUOUS_TARGET = 0.5
CONTINUOUS_ACTION_BOUND = 1.0

# '#' wall, '.' floor, 'o' dot, 'A' shared start cell (the hub)
FORAGE_TEMPLATES = (
    ("#######",
     "#o#.#o#",
     "#.#.#.#",
     "#..A..#",
     "#.#.#.#",
     "#o#.#o#",
     "#######"),
    ("#######",
     "#o...o#",
     "###.###",
     "#..A..#",
     "###.###",
     "#o...o#",
     "#######"),
    ("#######",
     "#o...##",
     "#.##..#",
     "#..A.o#",
     "##.##.#",
     "#o...o#",
     "#######"),
    ("#######",
     "#..o..#",
     "#.###.#",
     "#o.A.o#",
     "#.###.#",
     "#..o..#",
     "#######"),
)


@dataclass(frozen=True)
class CategoricalSpace:
    """n discrete actions."""
    n: int
    kind: str = "categorical"

    @property
    def dim(self) -> int:
        """Policy head width."""
        return self.n


@dataclass(frozen=True)
class ContinuousSpace:
    """Box of dim real actions within [low, high]."""
    dim: int
    low: float
    high: float
    kind: str = "gaussian"


ActionSpace = Union[CategoricalSpace, ContinuousSpace]


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment."""
    name: str
    num_agents: int
    action_space: ActionSpace
    observation_dim: int
    state_dim: int
    max_episode_length: int
    reward_range: Tuple[float, float]

    def __post_init__(self):
        if self.num_agents < 2:
            raise InvalidInputException("Invalid environment: need at least 2 agents")
        if self.max_episode_length < 1:
            raise InvalidInputException("Invalid environment: max episode length must be >= 1")


@dataclass(frozen=True)
class EnvStep:
    """What every agent sees after a reset or a step."""
    observations: np.ndarray
    state: np.ndarray
    reward: float
    done: bool
    timestep: int


class CooperativeEnv(ABC):
    """Shared-reward multi-agent environment."""

    @property
    @abstractmethod
    def spec(self) -> EnvSpec:
        """The environment's static description."""

    @abstractmethod
    def reset(self, seed: Optional[int] = None) -> EnvStep:
        """Starts a new episode."""

    @abstractmethod
    def step(self, joint_action: Sequence[int]) -> EnvStep:
        """Advances every agent at once."""

    def _check_joint_action(self, joint_action, num_actions: int) -> List[int]:
        actions = list(np.asarray(joint_action).ravel())
        if len(actions) != self.spec.num_agents:
            raise InvalidInputException(
                f"Invalid joint action: expected {self.spec.num_agents} actions, got {len(actions)}")
        checked = []
        for action in actions:
            try:
                integral = float(action) == int(action)
            except (TypeError, ValueError):
                integral = False
            if not integral or not 0 <= int(action) < num_actions:
                raise InvalidInputException(
                    f"Invalid action {action}: must be an integer in [0, {num_actions})")
            checked.append(int(action))
        return checked

    def _check_continuous_action(self, joint_action) -> np.ndarray:
        space = self.spec.action_space
        try:
            actions = np.asarray(joint_action, dtype=float).reshape(self.spec.num_agents, space.dim)
        except (TypeError, ValueError) as exc:
            raise InvalidInputException(
                f"Invalid joint action: expected {self.spec.num_agents} x {space.dim} real values"
            ) from exc
        if not np.all(np.isfinite(actions)):
            raise InvalidInputException("Invalid joint action: values must be finite")
        return actions


def _agent_one_hot(num_agents: int, enabled: bool) -> np.ndarray:
    return np.eye(num_agents) if enabled else np.zeros((num_agents, 0))


class MatrixGame(CooperativeEnv):
    """One-step game: reward 1 when all agents choose pairwise-distinct actions."""

    def __init__(self, num_agents: int = 2, num_actions: int = 2, agent_id_encoding: bool = True):
        if num_actions < 2:
            raise InvalidInputException("Invalid matrix game: need at least 2 actions")
        self.__ids = _agent_one_hot(num_agents, agent_id_encoding)
        self.__spec = EnvSpec(
            name="matrix_game", num_agents=num_agents,
            action_space=CategoricalSpace(num_actions),
            observation_dim=1 + self.__ids.shape[1], state_dim=1,
            max_episode_length=1, reward_range=(0.0, 1.0))
        self.__done = True

    @property
    def spec(self) -> EnvSpec:
        return self.__spec

    def __observe(self, reward: float, done: bool, timestep: int) -> EnvStep:
        observations = np.hstack([np.ones((self.__spec.num_agents, 1)), self.__ids])
        return EnvStep(observations, np.zeros(1), reward, done, timestep)

    def reset(self, seed: Optional[int] = None) -> EnvStep:
        self.__done = False
        return self.__observe(0.0, False, 0)

    def step(self, joint_action: Sequence[int]) -> EnvStep:
        if self.__done:
            raise InvalidInputException("Episode finished: call reset before stepping")
        actions = self._check_joint_action(joint_action, self.__spec.action_space.n)
        reward = 1.0 if len(set(actions)) == len(actions) else 0.0
        self.__done = True
        return self.__observe(reward, True, 1)


class ForageGrid(CooperativeEnv):
    """
    Dot-collection gridworld.

    Actions are Up, Down, Left, Right and Eat. Moving into a wall leaves the
    agent in place and agents may share a cell. Eating a dot yields +1.0 split
    evenly among the agents eating it in the same step, and the team pays
    -0.025 every step. Once every dot is eaten they all reappear on their
    original cells. The layout is one of FORAGE_TEMPLATES, picked by the seed.
    """

    CHANNELS = 3

    def __init__(self, num_agents: int = 2, episode_length: int = FORAGE_EPISODE_LENGTH,
                 agent_id_encoding: bool = True):
        self.__ids = _agent_one_hot(num_agents, agent_id_encoding)
        side = len(FORAGE_TEMPLATES[0])
        view = 2 * FORAGE_VIEW_RADIUS + 1
        self.__spec = EnvSpec(
            name="forage", num_agents=num_agents,
            action_space=CategoricalSpace(FORAGE_NUM_ACTIONS),
            observation_dim=view * view * self.CHANNELS + self.__ids.shape[1],
            state_dim=side * side * (2 + num_agents) + 1,
            max_episode_length=episode_length,
            reward_range=(FORAGE_STEP_PENALTY,
                          num_agents * FORAGE_DOT_REWARD + FORAGE_STEP_PENALTY))
        self.__walls = np.zeros((side, side), dtype=bool)
        self.__dot_cells = np.zeros((side, side), dtype=bool)
        self.__dots = np.zeros((side, side), dtype=bool)
        self.__positions = np.zeros((num_agents, 2), dtype=int)
        self.__timestep = 0
        self.__done = True
        self.template_index = 0
        self.dots_consumed = 0
        self.dot_reward_total = 0.0

    @property
    def spec(self) -> EnvSpec:
        return self.__spec

    def __load_template(self, index: int):
        rows = FORAGE_TEMPLATES[index]
        start = None
        for i, row in enumerate(rows):
            for j, cell in enumerate(row):
                self.__walls[i, j] = cell == "#"
                self.__dot_cells[i, j] = cell == "o"
                if cell == "A":
                    start = (i, j)
        self.__dots = self.__dot_cells.copy()
        self.__positions[:] = start

    def reset(self, seed: Optional[int] = None) -> EnvStep:
        rng = np.random.default_rng(seed)
        self.template_index = int(rng.integers(len(FORAGE_TEMPLATES)))
        self.__load_template(self.template_index)
        self.__timestep = 0
        self.__done = False
        self.dots_consumed = 0
        self.dot_reward_total = 0.0
        return self.__observe(0.0)

    def step(self, joint_action: Sequence[int]) -> EnvStep:
        if self.__done:
            raise InvalidInputException("Episode finished: call reset before stepping")
        actions = self._check_joint_action(joint_action, FORAGE_NUM_ACTIONS)
        for agent, action in enumerate(actions):
            if action in MOVES:
                row, col = self.__positions[agent] + MOVES[action]
                if not self.__walls[row, col]:
                    self.__positions[agent] = (row, col)
        eaters = {}
        for agent, action in enumerate(actions):
            if action == ACTION_EAT:
                eaters.setdefault(tuple(self.__positions[agent]), []).append(agent)
        contributions = np.zeros(self.__spec.num_agents)
        for cell, agents in eaters.items():
            if self.__dots[cell]:
                self.__dots[cell] = False
                self.dots_consumed += 1
                contributions[agents] += FORAGE_DOT_REWARD / len(agents)
        if not self.__dots.any():
            self.__dots = self.__dot_cells.copy()
        dot_reward = float(contributions.sum())
        self.dot_reward_total += dot_reward
        self.__timestep += 1
        self.__done = self.__timestep >= self.__spec.max_episode_length
        return self.__observe(dot_reward + FORAGE_STEP_PENALTY)

    def __observe(self, reward: float) -> EnvStep:
        side = self.__walls.shape[0]
        pad = FORAGE_VIEW_RADIUS
        walls = np.pad(self.__walls, pad, constant_values=True)
        dots = np.pad(self.__dots, pad, constant_values=False)
        occupancy = np.zeros((self.__spec.num_agents, side + 2 * pad, side + 2 * pad))
        for agent, (row, col) in enumerate(self.__positions):
            occupancy[agent, row + pad, col + pad] = 1.0
        observations = []
        for agent, (row, col) in enumerate(self.__positions):
            window = (slice(row, row + 2 * pad + 1), slice(col, col + 2 * pad + 1))
            others = np.delete(occupancy, agent, axis=0).sum(axis=0)[window] > 0
            cells = np.stack([walls[window], dots[window], others], axis=-1)
            observations.append(np.concatenate([cells.astype(float).ravel(), self.__ids[agent]]))
        grid = np.zeros((side, side, self.__spec.num_agents))
        for agent, (row, col) in enumerate(self.__positions):
            grid[row, col, agent] = 1.0
        state = np.concatenate([
            np.stack([self.__walls, self.__dots], axis=-1).astype(float).ravel(),
            grid.ravel(),
            [self.__timestep / self.__spec.max_episode_length],
        ])
        return EnvStep(np.array(observations), state, float(reward), self.__done, self.__timestep)

    @property
    def positions(self) -> np.ndarray:
        """Copy of the agents' (row, col) positions."""
        return self.__positions.copy()

    @property
    def dots(self) -> np.ndarray:
        """Copy of the boolean dot map."""
        return self.__dots.copy()


class ContinuousGame(CooperativeEnv):
    """
    One-step game with one real-valued action per agent.

    Actions are clipped to [-1, 1]. Even-numbered agents should pick +0.5 and
    odd-numbered ones -0.5; the team reward is minus the mean squared
    distance to those targets, so 0 is optimal.
    """

    def __init__(self, num_agents: int = 2, agent_id_encoding: bool = True):
        self.__ids = _agent_one_hot(num_agents, agent_id_encoding)
        self.__targets = np.where(np.arange(num_agents) % 2 == 0, CONTINUOUS_TARGET,
                                  -CONTINUOUS_TARGET)
        worst = (CONTINUOUS_ACTION_BOUND + CONTINUOUS_TARGET) ** 2
        self.__spec = EnvSpec(
            name="continuous_game", num_agents=num_agents,
            action_space=ContinuousSpace(1, -CONTINUOUS_ACTION_BOUND, CONTINUOUS_ACTION_BOUND),
            observation_dim=1 + self.__ids.shape[1], state_dim=1,
            max_episode_length=1, reward_range=(-worst, 0.0))
        self.__done = True

    @property
    def spec(self) -> EnvSpec:
        return self.__spec

    @property
    def targets(self) -> np.ndarray:
        """Optimal action of every agent."""
        return self.__targets.copy()

    def __observe(self, reward: float, done: bool, timestep: int) -> EnvStep:
        observations = np.hstack([np.ones((self.__spec.num_agents, 1)), self.__ids])
        return EnvStep(observations, np.zeros(1), reward, done, timestep)

    def reset(self, seed: Optional[int] = None) -> EnvStep:
        self.__done = False
        return self.__observe(0.0, False, 0)

    def step(self, joint_action) -> EnvStep:
        if self.__done:
            raise InvalidInputException("Episode finished: call reset before stepping")
        space = self.__spec.action_space
        actions = np.clip(self._check_continuous_action(joint_action)[:, 0], space.low, space.high)
        reward = -float(np.mean((actions - self.__targets) ** 2))
        self.__done = True
        return self.__observe(reward, True, 1)


ENVIRONMENTS = {"matrix_game": MatrixGame, "forage": ForageGrid, "continuous_game": ContinuousGame}
ENV_PARAMETERS = {"matrix_game": ("num_agents", "num_actions"),
                  "forage": ("num_agents", "episode_length"),
                  "continuous_game": ("num_agents",)}


def make_env(name: str, **kwargs) -> CooperativeEnv:
    """
    Builds a registered environment.

    Raises:
        InvalidInputException: on an unknown name or parameter.
    """
    if name not in ENVIRONMENTS:
        raise InvalidInputException(
            f"Unknown environment '{name}': must be one of {', '.join(sorted(ENVIRONMENTS))}")
    allowed = set(ENV_PARAMETERS[name]) | {"agent_id_encoding"}
    unknown = set(kwargs) - allowed
    if unknown:
        raise InvalidInputException(
            f"Unknown parameter(s) for {name}: {', '.join(sorted(unknown))}")
    return ENVIRONMENTS[name](**kwargs)


@dataclass
class ContractReport:
    """Outcome of env_contract_check."""
    env_name: str
    steps_checked: int = 0
    episodes_completed: int = 0
    violations: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        """True when no violation was found."""
        return not self.violations


def _rollout_actions(env: CooperativeEnv, seed: int, steps: int, actions_rng):
    trajectory = []
    trajectory.append(env.reset(seed))
    space = env.spec.action_space
    for _ in range(steps):
        if space.kind == "gaussian":
            joint = actions_rng.uniform(space.low, space.high, size=(env.spec.num_agents, space.dim))
        else:
            joint = actions_rng.integers(space.n, size=env.spec.num_agents)
        step = env.step(joint)
        trajectory.append(step)
        if step.done:
            trajectory.append(env.reset(seed))
    return trajectory


def env_contract_check(env: CooperativeEnv, seed: int = 7, steps: int = 1000) -> ContractReport:
    """
    Checks seed determinism, dimension constancy, reward bounds and termination.

    Never raises: anything that goes wrong is reported as a violation.
    """
    report = ContractReport(env.spec.name)
    spec = env.spec
    try:
        first = _rollout_actions(env, seed, steps, np.random.default_rng(seed))
        second = _rollout_actions(env, seed, steps, np.random.default_rng(seed))
    except Exception as exc:  # pylint: disable=broad-except
        report.violations.append(f"environment raised {type(exc).__name__}: {exc}")
        return report
    low, high = spec.reward_range
    episode_length = 0
    for index, (one, two) in enumerate(zip(first, second)):
        if not (np.array_equal(one.observations, two.observations)
                and np.array_equal(one.state, two.state) and one.reward == two.reward
                and one.done == two.done):
            report.violations.append(f"non-deterministic transition at record {index}")
            break
    for step in first:
        if step.observations.shape != (spec.num_agents, spec.observation_dim):
            report.violations.append(f"observation shape {step.observations.shape} at t={step.timestep}")
        if step.state.shape != (spec.state_dim,):
            report.violations.append(f"state shape {step.state.shape} at t={step.timestep}")
        if step.timestep == 0:
            episode_length = 0
            continue
        report.steps_checked += 1
        episode_length += 1
        if not np.isfinite(step.reward) or not low - 1e-12 <= step.reward <= high + 1e-12:
            report.violations.append(f"reward {step.reward} outside [{low}, {high}]")
        if episode_length > spec.max_episode_length:
            report.violations.append(f"episode exceeded {spec.max_episode_length} steps")
        if step.done:
            report.episodes_completed += 1
            if episode_length != spec.max_episode_length and spec.name == "forage":
                report.violations.append(f"forage episode ended after {episode_length} steps")
    return report


class TrajectoryRecorder:
    """JSON-lines trajectory dump, one line per environment step."""

    def __init__(self, path: str):
        self.path = path
        self.__file = None

    def __enter__(self):
        self.__file = open(self.path, "w", encoding="utf-8")  # pylint: disable=consider-using-with
        return self

    def __exit__(self, exc_type, exc, traceback):
        self.__file.close()
        self.__file = None

    @staticmethod
    def observation_hash(observation: np.ndarray) -> str:
        """Short SHA-256 digest of one agent's observation."""
        return hashlib.sha256(np.ascontiguousarray(observation, dtype=float).tobytes()).hexdigest()[:16]

    def record(self, step: EnvStep, actions: Optional[Sequence] = None):
        """Appends one step."""
        line = {
            "timestep": step.timestep,
            "state": [float(v) for v in step.state],
            "observation_hashes": [self.observation_hash(o) for o in step.observations],
            "actions": None if actions is None else np.asarray(actions).tolist(),
            "reward": step.reward,
            "done": bool(step.done),
        }
        self.__file.write(json.dumps(line) + "\n")


def record_trajectory(env: CooperativeEnv, path: str, policy: Callable[[EnvStep], Sequence[int]],
                      seed: Optional[int] = None) -> int:
    """
    Plays one episode with the given policy and dumps it as JSON lines.

    Returns:
        int: number of steps written after the reset line.
    """
    steps = 0
    with TrajectoryRecorder(path) as recorder:
        current = env.reset(seed)
        recorder.record(current)
        while not current.done:
            actions = policy(current)
            current = env.step(actions)
            recorder.record(current, actions)
            steps += 1
    logger.info("Wrote %d-step trajectory to %s", steps, path)
    return steps
