"""MARS RATIO MODULE: RATIO SURROGATES, TRUST REGIONS AND THE CTDE TRAINING TOOLKIT"""

__version__ = "0.1.0"

# pylint: disable=wrong-import-position
from .ratio_objective_exception import (RatioObjectiveException, RatioDomainException,
                                        InvalidInputException, UnsupportedVariantException,
                                        ConfigValidationException, NumericInstabilityException)
from .objective_core import (SurrogateEval, mars_penalty, mars_penalty_grad, mars_surrogate,
                             mars_stationary_point, mappo_surrogate, maspo_surrogate,
                             geometric_symmetrize, truncation_region, ratio_from_log_probs)
from .trust_region import (Variant, TrustRegionSpec, select_target, alpha_for_target,
                           alpha_for_additive_epsilon, resolve)
from .advantage import RolloutBatch, AdvantageSet, compute_gae, normalize_advantages
from .envs import MatrixGame, ForageGrid, make_env, env_contract_check
from .trainer import TrainConfig, DiagnosticsRecord, run_training, collapse_probe
from .run_config import RunManifest, load_config
from .metrics import RunSeries, AggregateReport, iqm, bootstrap_ci, probability_of_improvement
