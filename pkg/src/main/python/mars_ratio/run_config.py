"""
Run-config files and run manifests.

A run config is one JSON object with the sections trust_region, trainer and
env. Loading is strict: duplicate keys, unknown keys, wrong types and
out-of-range values are rejected with the offending key in the message.
"""

import json
import logging
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import Dict, Mapping

from mars_ratio.envs import ENV_PARAMETERS, ENVIRONMENTS
from mars_ratio.ratio_objective_exception import (ConfigValidationException,
                                                  RatioObjectiveException)
from mars_ratio.trainer import TRAINER_FIELDS, TrainConfig, config_hash
from mars_ratio.trust_region import PARAMETER_NAMES, TrustRegionSpec, parse_variant

logger = logging.getLogger(__name__)

SECTIONS = ("trust_region", "trainer", "env")
MANIFEST_FILE = "manifest.json"

INTEGER_FIELDS = ("num_minibatches", "num_epochs", "rollout_length", "update_batch_size",
                  "seed", "total_timesteps", "eval_interval", "eval_episodes")
FLAG_FIELDS = ("advantage_normalization", "agent_id_encoding")
ENV_INTEGER_FIELDS = ("num_agents", "num_actions", "episode_length")


def load_json_with_duplicate_check(input_file: str):
    """
    Loads a JSON file while checking for duplicate keys.

    Args:
        input_file (str): The path to the JSON file.

    Returns:
        dict: The parsed JSON data.

    Raises:
        ConfigValidationException: If the file is missing, is not JSON or repeats a key.
    """
    if not os.path.exists(input_file):
        raise ConfigValidationException(f"The config file is not found: {input_file}")

    def detect_duplicates(pairs):
        seen = set()
        for key, _ in pairs:
            if key in seen:
                raise ConfigValidationException(f"Duplicate {key} key found in JSON")
            seen.add(key)
        return OrderedDict(pairs)

    try:
        with open(input_file, "r", encoding="utf-8") as file:
            return json.load(file, object_pairs_hook=detect_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigValidationException("The config file is not in JSON format") from exc


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_section(data: Mapping, name: str) -> Dict:
    section = data.get(name, {})
    if not isinstance(section, Mapping):
        raise ConfigValidationException(f"Invalid {name}: section must be a JSON object")
    return dict(section)


def _validate_trust_region(section: Dict) -> TrustRegionSpec:
    if "variant" not in section:
        raise ConfigValidationException("Missing trust_region.variant")
    try:
        variant = parse_variant(section["variant"])
    except RatioObjectiveException as exc:
        raise ConfigValidationException(f"Invalid trust_region.variant: {exc.message}") from exc
    allowed = set(PARAMETER_NAMES[variant]) | {"variant"}
    for key, value in section.items():
        if key not in allowed:
            raise ConfigValidationException(
                f"Unknown key trust_region.{key} for variant {variant.value}")
        if key != "variant" and not _is_number(value):
            raise ConfigValidationException(f"Invalid trust_region.{key}: must be a number")
    try:
        return TrustRegionSpec.from_dict(section)
    except RatioObjectiveException as exc:
        raise ConfigValidationException(f"Invalid trust_region: {exc.message}") from exc


def _validate_trainer(section: Dict) -> Dict:
    result = {}
    for key, value in section.items():
        if key not in TRAINER_FIELDS:
            raise ConfigValidationException(f"Unknown key trainer.{key}")
        if key in INTEGER_FIELDS:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigValidationException(f"Invalid trainer.{key}: must be an integer")
        elif key in FLAG_FIELDS:
            if not isinstance(value, bool):
                raise ConfigValidationException(f"Invalid trainer.{key}: must be true or false")
        elif key == "hidden_sizes":
            if not isinstance(value, list) or not value or not all(
                    isinstance(h, int) and not isinstance(h, bool) for h in value):
                raise ConfigValidationException(
                    "Invalid trainer.hidden_sizes: must be a non-empty list of integers")
            value = tuple(value)
        elif not _is_number(value):
            raise ConfigValidationException(f"Invalid trainer.{key}: must be a number")
        result[key] = value
    return result


def _validate_env(section: Dict) -> Dict:
    name = section.pop("name", "matrix_game")
    if name not in ENVIRONMENTS:
        raise ConfigValidationException(
            f"Invalid env.name '{name}': must be one of {', '.join(sorted(ENVIRONMENTS))}")
    for key, value in section.items():
        if key not in ENV_PARAMETERS[name]:
            raise ConfigValidationException(f"Unknown key env.{key} for environment {name}")
        if key in ENV_INTEGER_FIELDS and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigValidationException(f"Invalid env.{key}: must be an integer")
    return {"env_name": name, "env_params": section}


def config_from_dict(data: Mapping) -> TrainConfig:
    """
    Validates a parsed config document and builds the TrainConfig.

    Raises:
        ConfigValidationException: naming the offending key and constraint.
    """
    if not isinstance(data, Mapping) or not data:
        raise ConfigValidationException("Empty JSON data")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigValidationException(f"Unknown section(s): {', '.join(sorted(unknown))}")
    spec = _validate_trust_region(_check_section(data, "trust_region"))
    trainer = _validate_trainer(_check_section(data, "trainer"))
    env = _validate_env(_check_section(data, "env"))
    config = TrainConfig(trust_region=spec, **trainer, **env)
    config.make_env()
    return config


def load_config(input_file: str) -> TrainConfig:
    """Reads and validates a run-config file."""
    config = config_from_dict(load_json_with_duplicate_check(input_file))
    logger.debug("Loaded config %s (hash %s)", input_file, config_hash(config))
    return config


@dataclass(frozen=True)
class RunManifest:
    """Where a run came from: config path, config hash, output dir, version and time."""
    config_path: str
    config_hash: str
    output_dir: str
    tool_version: str
    timestamp: str

    @classmethod
    def create(cls, config_path: str, config: TrainConfig, output_dir: str) -> "RunManifest":
        """Manifest for a run that is about to be written."""
        # pylint: disable=import-outside-toplevel,cyclic-import
        from mars_ratio import __version__
        return cls(config_path, config_hash(config), output_dir, __version__,
                   datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"))

    def write(self, run_dir: str):
        """Writes manifest.json into the run directory."""
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, MANIFEST_FILE), "w", encoding="utf-8") as file:
            json.dump(asdict(self), file, indent=4, sort_keys=True)

    @classmethod
    def read(cls, run_dir: str) -> "RunManifest":
        """
        Reads manifest.json and checks its hash against the run's config.json.

        Raises:
            ConfigValidationException: if either file is missing or the hashes differ.
        """
        data = load_json_with_duplicate_check(os.path.join(run_dir, MANIFEST_FILE))
        try:
            manifest = cls(**data)
        except TypeError as exc:
            raise ConfigValidationException(f"Invalid manifest in {run_dir}") from exc
        config = config_from_dict(load_json_with_duplicate_check(os.path.join(run_dir, "config.json")))
        actual = config_hash(config)
        if actual != manifest.config_hash:
            raise ConfigValidationException(
                f"Config hash mismatch in {run_dir}: manifest {manifest.config_hash}, "
                f"config.json {actual}")
        return manifest
