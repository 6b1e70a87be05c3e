import json
import os
import shutil
import tempfile
import unittest

from mars_ratio.ratio_objective_exception import ConfigValidationException
from mars_ratio.run_config import (MANIFEST_FILE, RunManifest, config_from_dict, load_config,
                                   load_json_with_duplicate_check)
from mars_ratio.trainer import canonical_config_json, config_hash
from mars_ratio.trust_region import Variant


class TestLoadConfig(unittest.TestCase):

    def setUp(self):
        """Create a temporary directory with one file per config variant."""
        self.test_dir = tempfile.mkdtemp()

        self.test_data = {
            "valid_json": '{ "trust_region": { "variant": "mars", "b_lower": 0.8, "b_upper": 1.25 }, "trainer": { "seed": 3, "hidden_sizes": [16, 16], "advantage_normalization": false }, "env": { "name": "forage", "num_agents": 3 } }',
            "valid_defaults": '{ "trust_region": { "variant": "mappo" } }',
            "missing_start_brace": '"trust_region": { "variant": "mars" } }',
            "duplicate_end_brace": '{ "trust_region": { "variant": "mars" } }}',
            "empty_data": '{ }',
            "not_an_object": '[ "mars" ]',
            "duplicate_section": '{ "trust_region": { "variant": "mars" }, "trust_region": { "variant": "maspo" } }',
            "unknown_section": '{ "trust_region": { "variant": "mars" }, "optimizer": { } }',
            "section_not_object": '{ "trust_region": { "variant": "mars" }, "trainer": 5 }',
            "missing_variant": '{ "trust_region": { "b_lower": 0.8 } }',
            "unknown_variant": '{ "trust_region": { "variant": "trpo" } }',
            "duplicate_variant_key": '{ "trust_region": { "variant": "mars", "variant": "mappo" } }',
            "variant_mismatched_key": '{ "trust_region": { "variant": "mars", "eps": 0.2 } }',
            "b_lower_above_one": '{ "trust_region": { "variant": "mars", "b_lower": 1.5, "b_upper": 1.25 } }',
            "b_upper_below_one": '{ "trust_region": { "variant": "mars", "b_lower": 0.8, "b_upper": 0.9 } }',
            "string_bound": '{ "trust_region": { "variant": "mars", "b_lower": "0.8" } }',
            "additive_b_too_large": '{ "trust_region": { "variant": "mars_additive_symmetric", "b": 2.5 } }',
            "unknown_trainer_key": '{ "trust_region": { "variant": "mars" }, "trainer": { "learning_rate": 0.001 } }',
            "duplicate_trainer_key": '{ "trust_region": { "variant": "mars" }, "trainer": { "seed": 1, "seed": 2 } }',
            "float_integer_field": '{ "trust_region": { "variant": "mars" }, "trainer": { "num_epochs": 4.0 } }',
            "boolean_integer_field": '{ "trust_region": { "variant": "mars" }, "trainer": { "seed": true } }',
            "string_number_field": '{ "trust_region": { "variant": "mars" }, "trainer": { "actor_lr": "5e-4" } }',
            "integer_flag_field": '{ "trust_region": { "variant": "mars" }, "trainer": { "agent_id_encoding": 1 } }',
            "empty_hidden_sizes": '{ "trust_region": { "variant": "mars" }, "trainer": { "hidden_sizes": [] } }',
            "negative_learning_rate": '{ "trust_region": { "variant": "mars" }, "trainer": { "actor_lr": -0.1 } }',
            "gamma_above_one": '{ "trust_region": { "variant": "mars" }, "trainer": { "gamma": 1.01 } }',
            "budget_below_one_update": '{ "trust_region": { "variant": "mars" }, "trainer": { "total_timesteps": 100 } }',
            "unknown_env": '{ "trust_region": { "variant": "mars" }, "env": { "name": "pong" } }',
            "unknown_env_key": '{ "trust_region": { "variant": "mars" }, "env": { "name": "matrix_game", "episode_length": 3 } }',
            "float_env_field": '{ "trust_region": { "variant": "mars" }, "env": { "name": "forage", "num_agents": 2.5 } }',
            "one_agent_env": '{ "trust_region": { "variant": "mars" }, "env": { "name": "matrix_game", "num_agents": 1 } }',
            "missing_key_separator": '{ "trust_region" { "variant": "mars" } }',
            "duplicate_key_separator": '{ "trust_region":: { "variant": "mars" } }',
            "missing_field_separator": '{ "trust_region": { "variant": "mars" } "trainer": { } }',
            "duplicate_field_separator": '{ "trust_region": { "variant": "mars" },, "trainer": { } }',
        }

        self.test_files = {}
        for key, data in self.test_data.items():
            file_path = os.path.join(self.test_dir, f"config_{key}.json")
            with open(file_path, "w", encoding="utf-8") as file:
                file.write(data)
            self.test_files[key] = file_path

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def get_file_path(self, key):
        """Helper method to get file path, with fallback."""
        return self.test_files.get(key, os.path.join(self.test_dir, f"config_{key}.json"))

    def run_error_test(self, key):
        """Loads a config that must be rejected and prints the message."""
        with self.assertRaises(ConfigValidationException) as context:
            load_config(self.get_file_path(key))
        print(f"{key}: {context.exception.message}")
        return context.exception.message

    def test_valid_config(self):
        config = load_config(self.get_file_path("valid_json"))
        self.assertEqual(config.trust_region.variant, Variant.MARS)
        self.assertEqual(config.trust_region.params, {"b_lower": 0.8, "b_upper": 1.25})
        self.assertEqual(config.seed, 3)
        self.assertEqual(config.hidden_sizes, (16, 16))
        self.assertFalse(config.advantage_normalization)
        self.assertEqual(config.env_name, "forage")
        self.assertEqual(config.env_params, {"num_agents": 3})

    def test_valid_defaults(self):
        config = load_config(self.get_file_path("valid_defaults"))
        self.assertEqual(config.trust_region.params, {"eps": 0.2})
        self.assertEqual(config.env_name, "matrix_game")
        self.assertEqual(config.rollout_length, 128)

    def test_missing_file(self):
        message = self.run_error_test("does_not_exist")
        self.assertIn("not found", message)

    # JSON structure tests
    def test_missing_start_brace(self):
        self.assertEqual(self.run_error_test("missing_start_brace"),
                         "The config file is not in JSON format")

    def test_duplicate_end_brace(self):
        self.run_error_test("duplicate_end_brace")

    def test_empty_data(self):
        self.assertEqual(self.run_error_test("empty_data"), "Empty JSON data")

    def test_not_an_object(self):
        self.run_error_test("not_an_object")

    def test_missing_key_separator(self):
        self.run_error_test("missing_key_separator")

    def test_duplicate_key_separator(self):
        self.run_error_test("duplicate_key_separator")

    def test_missing_field_separator(self):
        self.run_error_test("missing_field_separator")

    def test_duplicate_field_separator(self):
        self.run_error_test("duplicate_field_separator")

    # Section tests
    def test_duplicate_section(self):
        self.assertEqual(self.run_error_test("duplicate_section"),
                         "Duplicate trust_region key found in JSON")

    def test_unknown_section(self):
        self.assertIn("optimizer", self.run_error_test("unknown_section"))

    def test_section_not_object(self):
        self.assertIn("trainer", self.run_error_test("section_not_object"))

    # trust_region tests
    def test_missing_variant(self):
        self.assertIn("trust_region.variant", self.run_error_test("missing_variant"))

    def test_unknown_variant(self):
        self.assertIn("trpo", self.run_error_test("unknown_variant"))

    def test_duplicate_variant_key(self):
        self.assertIn("Duplicate variant", self.run_error_test("duplicate_variant_key"))

    def test_variant_mismatched_key(self):
        self.assertIn("trust_region.eps", self.run_error_test("variant_mismatched_key"))

    def test_b_lower_above_one(self):
        self.assertIn("b_lower", self.run_error_test("b_lower_above_one"))

    def test_b_upper_below_one(self):
        self.assertIn("b_upper", self.run_error_test("b_upper_below_one"))

    def test_string_bound(self):
        self.assertIn("trust_region.b_lower", self.run_error_test("string_bound"))

    def test_additive_b_too_large(self):
        self.run_error_test("additive_b_too_large")

    # trainer tests
    def test_unknown_trainer_key(self):
        self.assertIn("trainer.learning_rate", self.run_error_test("unknown_trainer_key"))

    def test_duplicate_trainer_key(self):
        self.assertIn("Duplicate seed", self.run_error_test("duplicate_trainer_key"))

    def test_float_integer_field(self):
        self.assertIn("trainer.num_epochs", self.run_error_test("float_integer_field"))

    def test_boolean_integer_field(self):
        self.assertIn("trainer.seed", self.run_error_test("boolean_integer_field"))

    def test_string_number_field(self):
        self.assertIn("trainer.actor_lr", self.run_error_test("string_number_field"))

    def test_integer_flag_field(self):
        self.assertIn("trainer.agent_id_encoding", self.run_error_test("integer_flag_field"))

    def test_empty_hidden_sizes(self):
        self.assertIn("trainer.hidden_sizes", self.run_error_test("empty_hidden_sizes"))

    def test_negative_learning_rate(self):
        self.assertIn("trainer.actor_lr", self.run_error_test("negative_learning_rate"))

    def test_gamma_above_one(self):
        self.assertIn("trainer.gamma", self.run_error_test("gamma_above_one"))

    def test_budget_below_one_update(self):
        self.assertIn("trainer.total_timesteps", self.run_error_test("budget_below_one_update"))

    # env tests
    def test_unknown_env(self):
        self.assertIn("pong", self.run_error_test("unknown_env"))

    def test_unknown_env_key(self):
        self.assertIn("env.episode_length", self.run_error_test("unknown_env_key"))

    def test_float_env_field(self):
        self.assertIn("env.num_agents", self.run_error_test("float_env_field"))

    def test_one_agent_env(self):
        self.assertIn("Invalid env", self.run_error_test("one_agent_env"))


class TestJsonLoading(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_nested_duplicate_is_detected(self):
        path = os.path.join(self.test_dir, "nested.json")
        with open(path, "w", encoding="utf-8") as file:
            file.write('{ "outer": { "inner": 1, "inner": 2 } }')
        with self.assertRaises(ConfigValidationException) as context:
            load_json_with_duplicate_check(path)
        self.assertEqual(context.exception.message, "Duplicate inner key found in JSON")

    def test_round_trip_through_canonical_json(self):
        config = config_from_dict({"trust_region": {"variant": "maspo_asymmetric",
                                                    "eps_lower": 0.1, "eps_upper": 0.3},
                                   "trainer": {"seed": 4}})
        again = config_from_dict(json.loads(canonical_config_json(config)))
        self.assertEqual(again, config)
        self.assertEqual(config_hash(again), config_hash(config))


class TestRunManifest(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.config = config_from_dict({"trust_region": {"variant": "mars"}})
        with open(os.path.join(self.test_dir, "config.json"), "w", encoding="utf-8") as file:
            file.write(canonical_config_json(self.config))

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_write_and_read(self):
        manifest = RunManifest.create("configs/run.json", self.config, self.test_dir)
        manifest.write(self.test_dir)
        self.assertEqual(RunManifest.read(self.test_dir), manifest)
        self.assertEqual(manifest.config_hash, config_hash(self.config))
        self.assertTrue(manifest.timestamp.endswith("Z"))

    def test_hash_mismatch(self):
        RunManifest.create("configs/run.json", self.config, self.test_dir).write(self.test_dir)
        with open(os.path.join(self.test_dir, "config.json"), "w", encoding="utf-8") as file:
            file.write('{"trust_region": {"variant": "mars"}, "trainer": {"seed": 9}}')
        with self.assertRaises(ConfigValidationException) as context:
            RunManifest.read(self.test_dir)
        self.assertIn("hash mismatch", context.exception.message)

    def test_malformed_manifest(self):
        with open(os.path.join(self.test_dir, MANIFEST_FILE), "w", encoding="utf-8") as file:
            file.write('{ "config_path": "x" }')
        with self.assertRaises(ConfigValidationException):
            RunManifest.read(self.test_dir)

    def test_missing_manifest(self):
        with self.assertRaises(ConfigValidationException):
            RunManifest.read(self.test_dir)


if __name__ == '__main__':
    unittest.main()
