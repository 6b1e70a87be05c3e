"""
Small feed-forward approximators with exact reverse-mode gradients.

Parameters are kept in one flat array (ParameterVector) described by an
ordered layout of (name, shape) entries, so optimizers, gradient clipping
and checkpoints work on a single vector. The network graph is fixed:
tanh hidden layers followed by a linear output, topped by a categorical or
diagonal-Gaussian policy head.
"""

import json
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mars_ratio.ratio_objective_exception import (ConfigValidationException,
                                                  InvalidInputException, RatioDomainException)

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]

HIDDEN_GAIN = math.sqrt(2.0)
ACTOR_OUTPUT_GAIN = 0.01
CRITIC_OUTPUT_GAIN = 1.0
DEFAULT_HIDDEN_SIZES = (64, 64)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
CHECKPOINT_FORMAT = "mars_ratio.checkpoint"
CHECKPOINT_VERSION = 1

CATEGORICAL = "categorical"
GAUSSIAN = "gaussian"


class ParameterVector:
    """Flat parameter array with (name, shape) layout metadata."""

    def __init__(self, layout: Sequence[Tuple[str, Sequence[int]]], values=None):
        self.layout: Layout = tuple((str(name), tuple(int(d) for d in shape))
                                    for name, shape in layout)
        self.__offsets = {}
        offset = 0
        for name, shape in self.layout:
            if name in self.__offsets:
                raise InvalidInputException(f"Duplicate layout entry '{name}'")
            size = int(np.prod(shape, dtype=int))
            self.__offsets[name] = (offset, size, shape)
            offset += size
        if values is None:
            self.values = np.zeros(offset)
        else:
            self.values = np.array(values, dtype=float).ravel()
            if self.values.size != offset:
                raise InvalidInputException(
                    f"Layout mismatch: layout holds {offset} elements, got {self.values.size}")
            if not np.all(np.isfinite(self.values)):
                raise InvalidInputException("Invalid parameters: all values must be finite")

    @property
    def size(self) -> int:
        """Total number of elements."""
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        """Writable view of one named block, in its own shape."""
        try:
            offset, size, shape = self.__offsets[name]
        except KeyError as exc:
            raise InvalidInputException(f"Unknown parameter block '{name}'") from exc
        return self.values[offset:offset + size].reshape(shape)

    def same_layout(self, other: "ParameterVector") -> bool:
        """True when both vectors describe the same blocks in the same order."""
        return self.layout == other.layout

    def check_layout(self, other: "ParameterVector"):
        """
        Raises:
            InvalidInputException: if the layouts differ.
        """
        if not self.same_layout(other):
            raise InvalidInputException("Layout mismatch between parameter vectors")

    def copy(self) -> "ParameterVector":
        """Deep copy."""
        return ParameterVector(self.layout, self.values.copy())

    def to_json(self) -> Dict:
        """Layout plus hex-encoded values (exact round trip)."""
        return {
            "layout": [[name, list(shape)] for name, shape in self.layout],
            "values": [float(v).hex() for v in self.values],
        }

    @classmethod
    def from_json(cls, data: Dict) -> "ParameterVector":
        """Inverse of to_json."""
        try:
            layout = [(name, tuple(shape)) for name, shape in data["layout"]]
            values = [float.fromhex(v) for v in data["values"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigValidationException("Invalid parameter block in checkpoint") from exc
        return cls(layout, values)


class GradientAccumulator(ParameterVector):
    """Gradient buffer sharing a ParameterVector's layout."""

    @classmethod
    def zeros_like(cls, params: ParameterVector) -> "GradientAccumulator":
        """Zero gradient for the given parameters."""
        return cls(params.layout)

    def reset(self):
        """Sets every element back to zero."""
        self.values[...] = 0.0

    def accumulate(self, other: ParameterVector):
        """Adds another gradient in place."""
        self.check_layout(other)
        self.values += other.values

    def norm(self) -> float:
        """Global L2 norm over all elements."""
        return float(np.sqrt(np.sum(self.values * self.values)))

    def copy(self) -> "GradientAccumulator":
        return GradientAccumulator(self.layout, self.values.copy())


def mlp_layout(input_dim: int, output_dim: int,
               hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES) -> Layout:
    """Layout of a network with the given layer widths."""
    widths = [int(input_dim)] + [int(h) for h in hidden_sizes] + [int(output_dim)]
    if any(w < 1 for w in widths):
        raise InvalidInputException("Invalid network widths: every layer needs >= 1 unit")
    layout = []
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        layout.append((f"layer{index}.weight", (fan_in, fan_out)))
        layout.append((f"layer{index}.bias", (fan_out,)))
    return tuple(layout)


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    flat = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_mlp(rng: np.random.Generator, input_dim: int, output_dim: int,
             hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES,
             output_gain: float = CRITIC_OUTPUT_GAIN) -> ParameterVector:
    """
    Orthogonal initialization: gain sqrt(2) on hidden layers, output_gain on
    the output layer, zero biases.
    """
    params = ParameterVector(mlp_layout(input_dim, output_dim, hidden_sizes))
    num_layers = len(params.layout) // 2
    for index in range(num_layers):
        weight = params.view(f"layer{index}.weight")
        gain = output_gain if index == num_layers - 1 else HIDDEN_GAIN
        weight[...] = _orthogonal(rng, weight.shape[0], weight.shape[1], gain)
    return params


class MlpContext:
    """Activations saved by mlp_forward for the backward pass."""

    def __init__(self, params: ParameterVector, layer_inputs: List[np.ndarray], squeeze: bool):
        self.__params = params
        self.__layer_inputs = layer_inputs
        self.__squeeze = squeeze

    def backward(self, grad_output) -> Tuple[GradientAccumulator, np.ndarray]:
        """
        Reverse-mode pass for a scalar whose gradient w.r.t. the output is grad_output.

        Returns:
            tuple: (gradient w.r.t. the parameters, gradient w.r.t. the input).
        """
        delta = np.array(grad_output, dtype=float)
        if self.__squeeze:
            delta = delta[None, :]
        if not np.all(np.isfinite(delta)):
            raise InvalidInputException("Invalid output gradient: values must be finite")
        grads = GradientAccumulator.zeros_like(self.__params)
        num_layers = len(self.__layer_inputs)
        for index in reversed(range(num_layers)):
            layer_input = self.__layer_inputs[index]
            weight = self.__params.view(f"layer{index}.weight")
            if delta.shape != (layer_input.shape[0], weight.shape[1]):
                raise InvalidInputException("Shape mismatch: output gradient does not match output")
            grads.view(f"layer{index}.weight")[...] = layer_input.T @ delta
            grads.view(f"layer{index}.bias")[...] = delta.sum(axis=0)
            delta = delta @ weight.T
            if index > 0:
                delta = delta * (1.0 - layer_input * layer_input)
        if not np.all(np.isfinite(grads.values)):
            raise InvalidInputException("Non-finite gradient after backward pass")
        grad_input = delta[0] if self.__squeeze else delta
        return grads, grad_input


def mlp_forward(params: ParameterVector, inputs) -> Tuple[np.ndarray, MlpContext]:
    """
    Runs the network on one input vector or a batch of rows.

    Args:
        params: weights laid out by mlp_layout.
        inputs: shape (input_dim,) or (batch, input_dim).

    Returns:
        tuple: (output, context for MlpContext.backward).

    Raises:
        InvalidInputException: on a shape mismatch or non-finite input.
    """
    x = np.asarray(inputs, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2:
        raise InvalidInputException("Shape mismatch: inputs must be a vector or a matrix")
    if not np.all(np.isfinite(x)):
        raise InvalidInputException("Invalid input: values must be finite")
    num_layers = len(params.layout) // 2
    first = params.view("layer0.weight")
    if x.shape[1] != first.shape[0]:
        raise InvalidInputException(
            f"Shape mismatch: network expects {first.shape[0]} inputs, got {x.shape[1]}")
    layer_inputs = []
    hidden = x
    for index in range(num_layers):
        layer_inputs.append(hidden)
        pre = hidden @ params.view(f"layer{index}.weight") + params.view(f"layer{index}.bias")
        hidden = np.tanh(pre) if index < num_layers - 1 else pre
    output = hidden[0] if squeeze else hidden
    return output, MlpContext(params, layer_inputs, squeeze)


class CategoricalPolicy:
    """Softmax distribution over a final axis of logits."""

    def __init__(self, logits):
        logits = np.asarray(logits, dtype=float)
        if logits.ndim == 0 or logits.shape[-1] < 2:
            raise InvalidInputException("Invalid logits: need at least 2 actions")
        if not np.all(np.isfinite(logits)):
            raise InvalidInputException("Invalid logits: values must be finite")
        shifted = logits - logits.max(axis=-1, keepdims=True)
        self.log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        self.probs = np.exp(self.log_probs)

    @property
    def num_actions(self) -> int:
        """Number of categories."""
        return self.log_probs.shape[-1]

    def entropy(self) -> np.ndarray:
        """-sum p log p, in nats."""
        return -np.sum(self.probs * self.log_probs, axis=-1)

    def log_prob(self, actions) -> np.ndarray:
        """Log-probability of integer actions."""
        index = np.asarray(actions, dtype=int)
        if np.any(index < 0) or np.any(index >= self.num_actions):
            raise InvalidInputException("Invalid action: index out of range")
        return np.take_along_axis(self.log_probs, index[..., None], axis=-1)[..., 0]

    def sample(self, uniforms) -> np.ndarray:
        """Inverse-CDF sampling from uniform variates in [0, 1)."""
        u = np.asarray(uniforms, dtype=float)
        cumulative = np.cumsum(self.probs, axis=-1)
        picks = np.sum(cumulative <= u[..., None], axis=-1)
        return np.minimum(picks, self.num_actions - 1)

    def output_gradient(self, actions, d_log_prob, d_entropy) -> np.ndarray:
        """Gradient w.r.t. the logits of sum(d_log_prob*log_prob + d_entropy*entropy)."""
        index = np.asarray(actions, dtype=int)
        one_hot = np.zeros_like(self.probs)
        np.put_along_axis(one_hot, index[..., None], 1.0, axis=-1)
        d_lp = np.asarray(d_log_prob, dtype=float)[..., None]
        d_h = np.asarray(d_entropy, dtype=float)[..., None]
        entropy = self.entropy()[..., None]
        return d_lp * (one_hot - self.probs) - d_h * self.probs * (self.log_probs + entropy)


class GaussianPolicy:
    """Diagonal Gaussian with log-std clamped to [LOG_STD_MIN, LOG_STD_MAX]."""

    HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)

    def __init__(self, mean, log_std):
        mean = np.asarray(mean, dtype=float)
        raw = np.asarray(log_std, dtype=float)
        if mean.shape != raw.shape or mean.ndim == 0:
            raise InvalidInputException("Shape mismatch: mean and log_std must have equal lengths")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(raw)):
            raise InvalidInputException("Invalid Gaussian parameters: values must be finite")
        self.mean = mean
        self.log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        self.__in_range = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        self.std = np.exp(self.log_std)

    def entropy(self) -> np.ndarray:
        """sum(log_std + 0.5*log(2*pi*e))."""
        return np.sum(self.log_std + self.HALF_LOG_TWO_PI + 0.5, axis=-1)

    def log_prob(self, actions) -> np.ndarray:
        """Diagonal Gaussian log-density."""
        z = (np.asarray(actions, dtype=float) - self.mean) / self.std
        return np.sum(-0.5 * z * z - self.log_std - self.HALF_LOG_TWO_PI, axis=-1)

    def sample(self, normals) -> np.ndarray:
        """mean + std * normals."""
        return self.mean + self.std * np.asarray(normals, dtype=float)

    def output_gradient(self, actions, d_log_prob, d_entropy) -> np.ndarray:
        """Gradient w.r.t. the concatenated [mean, log_std] network output."""
        z = (np.asarray(actions, dtype=float) - self.mean) / self.std
        d_lp = np.asarray(d_log_prob, dtype=float)[..., None]
        d_h = np.asarray(d_entropy, dtype=float)[..., None]
        d_mean = d_lp * z / self.std
        d_log_std = (d_lp * (z * z - 1.0) + d_h) * self.__in_range
        return np.concatenate([d_mean, d_log_std], axis=-1)


def categorical_head(logits) -> CategoricalPolicy:
    """Categorical policy from logits."""
    return CategoricalPolicy(logits)


def gaussian_head(mean, log_std) -> GaussianPolicy:
    """Diagonal Gaussian policy from mean and log-std vectors."""
    return GaussianPolicy(mean, log_std)


def policy_output_dim(kind: str, action_dim: int) -> int:
    """Network output width for a policy head."""
    if kind == CATEGORICAL:
        return action_dim
    if kind == GAUSSIAN:
        return 2 * action_dim
    raise InvalidInputException(f"Unknown policy head '{kind}'")


def policy_from_output(output, kind: str):
    """Wraps a network output in the matching policy head."""
    if kind == CATEGORICAL:
        return categorical_head(output)
    if kind == GAUSSIAN:
        output = np.asarray(output, dtype=float)
        half = output.shape[-1] // 2
        return gaussian_head(output[..., :half], output[..., half:])
    raise InvalidInputException(f"Unknown policy head '{kind}'")


@dataclass
class AdamState:
    """First and second moment buffers plus the step count."""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterVector) -> "AdamState":
        """Fresh state for the given parameters."""
        return cls(np.zeros(params.size), np.zeros(params.size), 0)


def adam_step(params: ParameterVector, grads: GradientAccumulator, state: AdamState,
              learning_rate: float) -> Tuple[ParameterVector, AdamState]:
    """
    One bias-corrected adaptive-moment descent step.

    Args:
        params: current parameters.
        grads: gradient of the loss being minimized.
        state: moment buffers from the previous step.
        learning_rate: step size, > 0.

    Returns:
        tuple: (new parameters, new state); inputs are left untouched.

    Raises:
        InvalidInputException: on layout mismatch.
        RatioDomainException: if the learning rate is not positive.
    """
    params.check_layout(grads)
    if state.first_moment.shape != params.values.shape:
        raise InvalidInputException("Layout mismatch between optimizer state and parameters")
    if not learning_rate > 0.0:
        raise RatioDomainException("Invalid learning rate: must be > 0")
    step = state.step + 1
    first = ADAM_BETA1 * state.first_moment + (1.0 - ADAM_BETA1) * grads.values
    second = ADAM_BETA2 * state.second_moment + (1.0 - ADAM_BETA2) * grads.values * grads.values
    first_hat = first / (1.0 - ADAM_BETA1 ** step)
    second_hat = second / (1.0 - ADAM_BETA2 ** step)
    values = params.values - learning_rate * first_hat / (np.sqrt(second_hat) + ADAM_EPSILON)
    return ParameterVector(params.layout, values), AdamState(first, second, step)


def clip_global_norm(grads: GradientAccumulator,
                     max_norm: float) -> Tuple[GradientAccumulator, float]:
    """
    Rescales a gradient whose global L2 norm exceeds max_norm.

    Returns:
        tuple: (clipped gradient, norm before clipping).
    """
    if not max_norm > 0.0:
        raise RatioDomainException("Invalid max_norm: must be > 0")
    norm = grads.norm()
    clipped = grads.copy()
    if norm > max_norm:
        clipped.values *= max_norm / norm
    return clipped, norm


def save_checkpoint(path: str, parameters: Dict[str, ParameterVector],
                    metadata: Optional[Dict] = None):
    """Writes named parameter vectors to a versioned JSON checkpoint."""
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": dict(metadata or {}),
        "parameters": {name: vector.to_json() for name, vector in parameters.items()},
    }
    with open(path, "w", encoding="utf-8") as file:
        json.dump(document, file, indent=1, sort_keys=True)


def load_checkpoint(path: str) -> Tuple[Dict[str, ParameterVector], Dict]:
    """
    Reads a checkpoint written by save_checkpoint.

    Returns:
        tuple: (named parameter vectors, metadata).

    Raises:
        ConfigValidationException: if the file is missing or malformed.
    """
    if not os.path.exists(path):
        raise ConfigValidationException(f"Checkpoint file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as file:
            document = json.load(file)
    except json.JSONDecodeError as exc:
        raise ConfigValidationException("The checkpoint is not in JSON format") from exc
    if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
        raise ConfigValidationException("Invalid checkpoint: unknown format")
    if document.get("version") != CHECKPOINT_VERSION:
        raise ConfigValidationException(
            f"Invalid checkpoint: unsupported version {document.get('version')}")
    parameters = {name: ParameterVector.from_json(block)
                  for name, block in document.get("parameters", {}).items()}
    return parameters, document.get("metadata", {})
