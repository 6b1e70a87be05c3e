import json
import os
import tempfile
import unittest
from dataclasses import replace

import numpy as np

from mars_ratio.advantage import AdvantageSet, compute_gae
from mars_ratio.approximator import ParameterVector, load_checkpoint, mlp_layout
from mars_ratio.objective_core import mars_stationary_point
from mars_ratio.ratio_objective_exception import (ConfigValidationException,
                                                  NumericInstabilityException)
from mars_ratio.run_config import load_config
from mars_ratio.trainer import (DIAGNOSTIC_COLUMNS, CtdeTrainer, DiagnosticsRecord, Minibatch,
                                TrainConfig, actor_loss, collapse_probe, config_hash,
                                critic_loss, load_diagnostics, run_training,
                                write_diagnostics_csv)
from mars_ratio.trust_region import TrustRegionSpec, Variant, alpha_for_target


def small_config(**overrides):
    values = {"rollout_length": 8, "update_batch_size": 2, "total_timesteps": 16 * 3,
              "hidden_sizes": (8,), "eval_interval": 2, "eval_episodes": 4}
    values.update(overrides)
    return TrainConfig(**values)


def critic_batch(states, returns, old_values):
    size = len(returns)
    return Minibatch(observations=np.zeros((size, 2, 1)), actions=np.zeros((size, 2), dtype=int),
                     old_log_probs=np.zeros((size, 2)), advantages=np.zeros(size),
                     returns=np.asarray(returns, dtype=float),
                     old_values=np.asarray(old_values, dtype=float),
                     states=np.asarray(states, dtype=float))


def shipped_config(name):
    return load_config(os.path.join(os.path.dirname(__file__), "..", "..", "..", "configs", name))


def best_eval_return(result):
    return max(value for _, value in result.evaluation_points())


def constant_critic(value):
    params = ParameterVector(mlp_layout(1, 1, ()))
    params.view("layer0.bias")[...] = value
    return params


class TestTrainConfig(unittest.TestCase):

    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual(config.trust_region.variant, Variant.MARS)
        self.assertEqual(config.steps_per_update, 256)
        self.assertEqual(config.num_updates, 300)
        self.assertEqual(config.hidden_sizes, (64, 64))

    def test_invalid_values(self):
        cases = {"actor_lr": 0.0, "gamma": 1.5, "gae_lambda": -0.1, "entropy_coeff": -1.0,
                 "hidden_sizes": (8, 0), "num_epochs": 0}
        for name, value in cases.items():
            with self.subTest(name=name):
                with self.assertRaises(ConfigValidationException) as context:
                    small_config(**{name: value})
                self.assertIn(name, context.exception.message)

    def test_budget_checks(self):
        with self.assertRaises(ConfigValidationException):
            small_config(rollout_length=2, update_batch_size=1, num_minibatches=3)
        with self.assertRaises(ConfigValidationException) as context:
            small_config(total_timesteps=10)
        print(str(context.exception))

    def test_make_env(self):
        self.assertEqual(small_config(env_name="forage").make_env().spec.name, "forage")
        with self.assertRaises(ConfigValidationException):
            small_config(env_params={"grid_size": 9}).make_env()
        with self.assertRaises(ConfigValidationException):
            small_config(env_name="pong").make_env()

    def test_to_dict(self):
        data = small_config(env_params={"num_actions": 3}).to_dict()
        self.assertEqual(set(data), {"trust_region", "trainer", "env"})
        self.assertEqual(data["env"], {"name": "matrix_game", "num_actions": 3})
        self.assertEqual(data["trainer"]["hidden_sizes"], [8])
        self.assertEqual(data["trust_region"]["variant"], "mars")

    def test_config_hash(self):
        config = small_config()
        self.assertEqual(config_hash(config), config_hash(small_config()))
        self.assertNotEqual(config_hash(config), config_hash(replace(config, seed=1)))
        self.assertEqual(len(config_hash(config)), 64)


class TestDiagnosticsCsv(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.temp_dir.name, "diagnostics.csv")

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_round_trip(self):
        records = [
            DiagnosticsRecord(1, 256, None, None, -0.1, 0.2, 1.3, 0.9, 1.1, 0.7, 0.3, 0.4),
            DiagnosticsRecord(2, 512, 0.5, 1.0 / 3.0, -0.2, 0.1, 1.2, 0.85, 1.2, 0.6, 0.2, 0.3),
        ]
        write_diagnostics_csv(self.path, records)
        self.assertEqual(load_diagnostics(self.path), records)
        with open(self.path, "r", encoding="utf-8") as file:
            self.assertEqual(file.readline().strip(), ",".join(DIAGNOSTIC_COLUMNS))

    def test_missing_and_bad_header(self):
        with self.assertRaises(ConfigValidationException):
            load_diagnostics(self.path)
        with open(self.path, "w", encoding="utf-8") as file:
            file.write("update,env_steps\n1,256\n")
        with self.assertRaises(ConfigValidationException):
            load_diagnostics(self.path)


class TestLosses(unittest.TestCase):

    def test_critic_loss_unclipped(self):
        result = critic_loss(critic_batch([[0.0]], [0.0], [0.9]), constant_critic(1.0), 0.2)
        self.assertAlmostEqual(result.loss, 0.5, places=12)
        self.assertAlmostEqual(float(result.grads.view("layer0.bias")[0]), 1.0, places=12)

    def test_critic_loss_clipped_branch_has_no_gradient(self):
        result = critic_loss(critic_batch([[1.0]], [2.0], [1.0]), constant_critic(1.5), 0.2)
        self.assertAlmostEqual(result.loss, 0.5 * 0.64, places=12)
        np.testing.assert_array_equal(result.grads.values, np.zeros(2))

    def test_critic_loss_takes_larger_error(self):
        result = critic_loss(critic_batch([[1.0]], [1.0], [1.0]), constant_critic(1.5), 0.2)
        self.assertAlmostEqual(result.loss, 0.125, places=12)
        self.assertAlmostEqual(float(result.grads.view("layer0.bias")[0]), 0.5, places=12)

    def test_first_minibatch_has_unit_ratios(self):
        trainer = CtdeTrainer(small_config())
        batches, _ = trainer.collect_rollout()
        sets = [compute_gae(batch) for batch in batches]
        data = Minibatch.from_rollouts(
            batches, AdvantageSet(np.concatenate([s.advantages for s in sets]),
                                  np.concatenate([s.returns for s in sets])))
        self.assertEqual(data.size, 16)
        result = actor_loss(data, trainer.actor, trainer.config.trust_region, 0.01)
        self.assertAlmostEqual(result.min_ratio, 1.0, places=12)
        self.assertAlmostEqual(result.max_ratio, 1.0, places=12)

    def test_non_finite_actor_loss(self):
        trainer = CtdeTrainer(small_config(trust_region=TrustRegionSpec.create(Variant.MAPPO)))
        batches, _ = trainer.collect_rollout()
        data = Minibatch.from_rollouts(batches[:1], AdvantageSet(np.full(8, 1e308), np.zeros(8)))
        with self.assertRaises(NumericInstabilityException) as context:
            actor_loss(data, trainer.actor, trainer.config.trust_region, 0.0)
        self.assertIn("min_ratio", context.exception.diagnostics)


class TestTraining(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_single_update(self):
        result = run_training(TrainConfig(total_timesteps=128 * 2, hidden_sizes=(8,),
                                          eval_episodes=4))
        self.assertEqual(len(result.diagnostics), 1)
        self.assertEqual(result.diagnostics[0].env_steps, 256)
        self.assertIsNotNone(result.diagnostics[0].eval_return)
        self.assertIsNotNone(result.diagnostics[0].mean_episode_return)

    def test_same_seed_same_diagnostics(self):
        first = run_training(small_config())
        second = run_training(small_config())
        self.assertEqual(first.diagnostics, second.diagnostics)
        np.testing.assert_array_equal(first.actor.values, second.actor.values)
        third = run_training(small_config(seed=1))
        self.assertNotEqual(first.diagnostics, third.diagnostics)

    def test_evaluation_schedule(self):
        result = run_training(small_config())
        self.assertEqual([r.update for r in result.diagnostics if r.eval_return is not None], [2, 3])
        self.assertEqual([step for step, _ in result.evaluation_points()], [32, 48])

    def test_run_artifact(self):
        out_dir = os.path.join(self.temp_dir.name, "run")
        config = small_config(env_name="forage", rollout_length=16, total_timesteps=32)
        result = run_training(config, out_dir)
        for name in ("config.json", "diagnostics.csv", "checkpoint.json", "summary.json"):
            self.assertTrue(os.path.exists(os.path.join(out_dir, name)), name)
        self.assertEqual(load_diagnostics(os.path.join(out_dir, "diagnostics.csv")),
                         result.diagnostics)
        parameters, metadata = load_checkpoint(os.path.join(out_dir, "checkpoint.json"))
        np.testing.assert_array_equal(parameters["actor"].values, result.actor.values)
        self.assertEqual(metadata["config_hash"], config_hash(config))
        with open(os.path.join(out_dir, "summary.json"), "r", encoding="utf-8") as file:
            summary = json.load(file)
        self.assertEqual(summary["variant"], "mars")
        self.assertEqual(summary["env"], "forage")
        self.assertIn(summary["ratio_gate_passed"], (True, False))

    def test_summary_gate_only_for_mars_family(self):
        result = run_training(small_config(trust_region=TrustRegionSpec.create(Variant.MASPO)))
        self.assertIsNone(result.summary()["ratio_gate_passed"])

    def test_continuous_game_trains(self):
        result = run_training(small_config(env_name="continuous_game"))
        self.assertEqual(len(result.diagnostics), 3)
        for record in result.diagnostics:
            self.assertTrue(np.isfinite(record.actor_loss))
            self.assertGreater(record.min_ratio, 0.0)
        for _, value in result.evaluation_points():
            self.assertLessEqual(value, 0.0)
            self.assertGreaterEqual(value, -2.25)


class TestShippedConfigs(unittest.TestCase):

    def test_matrix_game_solved_for_every_seed(self):
        config = shipped_config("matrix_game_mars.json")
        self.assertEqual(config.num_updates, 300)
        self.assertEqual(config.hidden_sizes, (64, 64))
        for seed in range(5):
            with self.subTest(seed=seed):
                result = run_training(replace(config, seed=seed))
                self.assertGreaterEqual(best_eval_return(result), 0.9)
                self.assertTrue(result.summary()["ratio_gate_passed"])

    @unittest.skipUnless(os.environ.get("MARS_RATIO_SLOW_TESTS"), "set MARS_RATIO_SLOW_TESTS=1")
    def test_forage_positive_return_for_most_seeds(self):
        config = replace(shipped_config("forage_mars.json"), total_timesteps=128 * 2 * 2000)
        positive = 0
        for seed in range(5):
            result = run_training(replace(config, seed=seed))
            positive += best_eval_return(result) > 0.0
        self.assertGreaterEqual(positive, 4)


class TestCollapseProbe(unittest.TestCase):

    def test_quadratic_penalty_collapses(self):
        result = collapse_probe(TrustRegionSpec.create(Variant.MASPO))
        self.assertEqual(result.probabilities.size, 501)
        self.assertLess(result.final_probability, 1e-3)

    def test_barrier_holds_stationary_ratio(self):
        result = collapse_probe(TrustRegionSpec.create(Variant.MARS))
        self.assertEqual(result.update_ratios.size, 1)
        self.assertGreater(result.final_probability, 1e-2)
        expected = mars_stationary_point(-20.0, alpha_for_target(-1.0, 0.8))
        self.assertAlmostEqual(result.ratio_floor, expected, places=6)
        self.assertAlmostEqual(result.ratio_floor, 0.2857, places=3)

    def test_barrier_outlasts_quadratic_penalty(self):
        maspo = collapse_probe(TrustRegionSpec.create(Variant.MASPO))
        mars = collapse_probe(TrustRegionSpec.create(Variant.MARS))
        self.assertLess(maspo.final_probability, mars.final_probability)

    def test_clip_stops_after_first_step(self):
        result = collapse_probe(TrustRegionSpec.create(Variant.MAPPO))
        self.assertAlmostEqual(result.final_probability, result.probabilities[1], places=12)
        self.assertLess(result.ratio_floor, 0.8)

    def test_barrier_keeps_per_update_ratio(self):
        result = collapse_probe(TrustRegionSpec.create(Variant.MARS), advantage=-3.0,
                                calibration=None, epochs_per_update=4)
        self.assertGreaterEqual(result.ratio_floor, 0.7)
        self.assertLess(result.ratio_floor, 1.0)
        self.assertLess(result.final_probability, result.probabilities[0])
        self.assertEqual(result.update_ratios.size, 125)

    def test_zero_advantage_leaves_policy(self):
        result = collapse_probe(TrustRegionSpec.create(Variant.MARS), steps=20, advantage=0.0)
        self.assertEqual(result.final_probability, result.probabilities[0])
        self.assertEqual(result.ratio_floor, 1.0)

    def test_to_dict(self):
        data = collapse_probe(TrustRegionSpec.create(Variant.MAPPO), steps=8).to_dict()
        self.assertEqual(data["trust_region"], {"variant": "mappo", "eps": 0.2})
        self.assertEqual(len(data["probabilities"]), 9)
        self.assertEqual(len(data["update_ratios"]), 1)
        self.assertEqual(data["calibration"], -1.0)
        self.assertIsNone(data["epochs_per_update"])

    def test_invalid_probe(self):
        with self.assertRaises(ConfigValidationException):
            collapse_probe(TrustRegionSpec.create(Variant.MARS), steps=0)


if __name__ == '__main__':
    unittest.main()
