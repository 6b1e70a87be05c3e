import argparse
import csv
import json
import os
import tempfile
import unittest
from unittest import mock

import numpy as np

from mars_ratio.approximator import init_mlp
from mars_ratio.cli import (EXIT_CHECK_FAILED, EXIT_OK, EXIT_RUN_FAILED, EXIT_USAGE, main,
                            parse_seeds)
from mars_ratio.ratio_objective_exception import NumericInstabilityException
from mars_ratio.run_config import RunManifest
from mars_ratio.trainer import DiagnosticsRecord, TrainConfig, TrainingResult, write_run_artifact
from mars_ratio.trust_region import TrustRegionSpec


def write_config(path, content):
    with open(path, "w", encoding="utf-8") as file:
        file.write(content if isinstance(content, str) else json.dumps(content))
    return path


def write_run(run_dir, variant, seed, returns):
    """Run artifact with a given evaluation curve."""
    config = TrainConfig(trust_region=TrustRegionSpec.create(variant), seed=seed, hidden_sizes=(4,))
    records = [DiagnosticsRecord(index + 1, 256 * (index + 1), None, value, 0.0, 0.0, 1.0,
                                 0.9, 1.1, 0.5, 0.1, 0.1)
               for index, value in enumerate(returns)]
    rng = np.random.default_rng(seed)
    result = TrainingResult(config, records, init_mlp(rng, 3, 2, (4,)), init_mlp(rng, 1, 1, (4,)))
    RunManifest.create("generated", config, run_dir).write(run_dir)
    write_run_artifact(run_dir, result)
    return run_dir


class TestParseSeeds(unittest.TestCase):

    def test_ranges(self):
        self.assertEqual(parse_seeds("3"), [3])
        self.assertEqual(parse_seeds("0..4"), [0, 1, 2, 3, 4])

    def test_invalid(self):
        for text in ("4..1", "a..b", "1..", ""):
            with self.assertRaises(argparse.ArgumentTypeError):
                parse_seeds(text)


class TestCli(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.out = os.path.join(self.temp_dir.name, "out")

    def tearDown(self):
        self.temp_dir.cleanup()

    def read_rows(self, path):
        with open(path, "r", encoding="utf-8") as file:
            return list(csv.DictReader(file))

    def test_usage_errors(self):
        self.assertEqual(main([]), EXIT_USAGE)
        self.assertEqual(main(["fly"]), EXIT_USAGE)
        self.assertEqual(main(["analyze", "--variant", "trpo"]), EXIT_USAGE)
        self.assertEqual(main(["train", "--seeds", "3..1"]), EXIT_USAGE)

    def test_version(self):
        self.assertEqual(main(["--version"]), EXIT_OK)

    def test_analyze(self):
        code = main(["analyze", "--variant", "mars", "--adv", "1", "--r-range", "0.01", "3", "300",
                     "--out", self.out])
        self.assertEqual(code, EXIT_OK)
        rows = self.read_rows(os.path.join(self.out, "curve_mars.csv"))
        self.assertEqual(len(rows), 300)
        signs = np.sign([float(row["ratio_gradient"]) for row in rows])
        self.assertEqual(np.count_nonzero(np.diff(signs)), 1)
        self.assertAlmostEqual(float(rows[0]["r"]), 0.01, places=12)

    def test_analyze_every_variant(self):
        self.assertEqual(main(["analyze", "--variant", "all", "--out", self.out]), EXIT_OK)
        self.assertEqual(len(os.listdir(self.out)), 7)

    def test_analyze_bad_parameters(self):
        self.assertEqual(main(["analyze", "--variant", "mars", "--param", "b_lower=1.5",
                               "--out", self.out]), EXIT_USAGE)
        self.assertEqual(main(["analyze", "--variant", "mars", "--param", "b_lower",
                               "--out", self.out]), EXIT_USAGE)
        self.assertEqual(main(["analyze", "--r-range", "3", "1", "10", "--out", self.out]),
                         EXIT_USAGE)

    def test_verify(self):
        self.assertEqual(main(["verify", "--suite", "calibration", "--out", self.out]), EXIT_OK)
        with open(os.path.join(self.out, "verification.json"), "r", encoding="utf-8") as file:
            data = json.load(file)
        self.assertTrue(data["passed"])
        self.assertEqual(data["seed"], 0)

    def test_verify_with_corrupted_penalty(self):
        code = main(["verify", "--suite", "symmetry", "--corrupt-penalty", "--out", self.out])
        self.assertEqual(code, EXIT_CHECK_FAILED)

    def test_global_options_before_command(self):
        code = main(["--out", self.out, "--seed", "5", "verify", "--suite", "symmetry"])
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(self.out, "verification.json"), "r", encoding="utf-8") as file:
            self.assertEqual(json.load(file)["seed"], 5)

    def test_train_with_bad_config(self):
        path = write_config(os.path.join(self.temp_dir.name, "bad.json"),
                            {"trust_region": {"variant": "mars", "b_lower": 1.5}})
        self.assertEqual(main(["train", "--config", path, "--out", self.out]), EXIT_USAGE)
        self.assertEqual(main(["train", "--out", self.out]), EXIT_USAGE)
        missing = os.path.join(self.temp_dir.name, "missing.json")
        self.assertEqual(main(["train", "--config", missing, "--out", self.out]), EXIT_USAGE)

    def test_train_seeds(self):
        path = write_config(os.path.join(self.temp_dir.name, "tiny.json"), {
            "trust_region": {"variant": "mars"},
            "trainer": {"rollout_length": 8, "total_timesteps": 16, "hidden_sizes": [8],
                        "eval_episodes": 2}})
        self.assertEqual(main(["train", "--config", path, "--seeds", "0..1", "--out", self.out]),
                         EXIT_OK)
        for seed in (0, 1):
            run_dir = os.path.join(self.out, f"seed_{seed}")
            self.assertEqual(RunManifest.read(run_dir).config_path, path)
            with open(os.path.join(run_dir, "summary.json"), "r", encoding="utf-8") as file:
                self.assertEqual(json.load(file)["seed"], seed)

    def test_train_single_seed_override(self):
        path = write_config(os.path.join(self.temp_dir.name, "tiny.json"), {
            "trust_region": {"variant": "maspo"},
            "trainer": {"rollout_length": 8, "total_timesteps": 16, "hidden_sizes": [8],
                        "eval_episodes": 2, "seed": 1}})
        self.assertEqual(main(["train", "--config", path, "--seed", "9", "--out", self.out]),
                         EXIT_OK)
        with open(os.path.join(self.out, "summary.json"), "r", encoding="utf-8") as file:
            summary = json.load(file)
        self.assertEqual(summary["seed"], 9)
        self.assertEqual(summary["variant"], "maspo")

    def test_diverged_training_is_a_run_failure(self):
        path = write_config(os.path.join(self.temp_dir.name, "tiny.json"),
                            {"trust_region": {"variant": "mars"}})
        failure = NumericInstabilityException("Non-finite actor loss", {"min_ratio": 0.0})
        with mock.patch("mars_ratio.cli.run_training", side_effect=failure):
            code = main(["train", "--config", path, "--out", self.out])
        self.assertEqual(code, EXIT_RUN_FAILED)
        self.assertNotEqual(code, EXIT_USAGE)

    def test_report(self):
        runs = []
        for variant, scale in (("mappo", 0.5), ("mars", 1.0)):
            for seed in range(4):
                returns = [scale * (0.2 + 0.1 * seed), scale * (0.5 + 0.1 * seed)]
                runs.append(write_run(os.path.join(self.temp_dir.name, f"{variant}_{seed}"),
                                      variant, seed, returns))
        self.assertEqual(main(["report", *runs, "--out", self.out]), EXIT_OK)
        with open(os.path.join(self.out, "aggregate.json"), "r", encoding="utf-8") as file:
            data = json.load(file)
        self.assertEqual(data["algorithms"], ["mappo", "mars"])
        self.assertEqual(data["tasks"], ["matrix_game"])
        self.assertIn("improvement", data)
        self.assertEqual(len(self.read_rows(os.path.join(self.out, "curves.csv"))), 4)

    def test_report_rejects_tampered_run(self):
        run_dir = write_run(os.path.join(self.temp_dir.name, "run"), "mars", 0, [0.1, 0.2])
        write_config(os.path.join(run_dir, "config.json"),
                     {"trust_region": {"variant": "mars"}, "trainer": {"seed": 3}})
        self.assertEqual(main(["report", run_dir, "--out", self.out]), EXIT_USAGE)

    def test_report_needs_input(self):
        self.assertEqual(main(["report", "--out", self.out]), EXIT_USAGE)

    def test_probe_and_report(self):
        probe_dir = os.path.join(self.temp_dir.name, "probe")
        code = main(["probe", "--variant", "mars", "--variant", "maspo", "--steps", "8",
                     "--out", probe_dir])
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(probe_dir, "probe_mars.json"), "r", encoding="utf-8") as file:
            self.assertEqual(len(json.load(file)["probabilities"]), 9)
        self.assertEqual(len(self.read_rows(os.path.join(probe_dir, "probe_maspo.csv"))), 9)
        files = [os.path.join(probe_dir, name) for name in ("probe_mars.json", "probe_maspo.json")]
        self.assertEqual(main(["report", "--probes", *files, "--out", self.out]), EXIT_OK)
        rows = self.read_rows(os.path.join(self.out, "probes.csv"))
        self.assertEqual([row["variant"] for row in rows], ["mars", "maspo"])

    def test_refreshed_self_calibrated_bandit(self):
        bandit_dir = os.path.join(self.temp_dir.name, "bandit")
        code = main(["probe", "--variant", "mars", "--steps", "8", "--adv", "-3",
                     "--self-calibrated", "--epochs-per-update", "4", "--out", bandit_dir])
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(bandit_dir, "probe_mars.json"), "r", encoding="utf-8") as file:
            data = json.load(file)
        self.assertIsNone(data["calibration"])
        self.assertEqual(data["epochs_per_update"], 4)
        self.assertEqual(len(data["update_ratios"]), 2)
        self.assertEqual(data["advantage"], -3.0)


if __name__ == '__main__':
    unittest.main()
