"""
Cross-run aggregate statistics.

Scores are min-max normalized per task over every algorithm and seed in the
report set, summarized per algorithm by the interquartile mean, and given
percentile confidence intervals from a bootstrap that resamples runs within
each task. Pairs of algorithms are compared by the probability of
improvement, with ties counted as one half.
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mars_ratio.ratio_objective_exception import (ConfigValidationException,
                                                  InvalidInputException, RatioDomainException)
from mars_ratio.run_config import RunManifest, config_from_dict, load_json_with_duplicate_check
from mars_ratio.trainer import load_diagnostics

logger = logging.getLogger(__name__)

DEFAULT_RESAMPLES = 2000
MIN_RESAMPLES = 1000
DEFAULT_LEVEL = 0.95
FINAL_FRACTION = 0.2
SUMMARIES = ("final", "final_20pct")
IQM_MIN_VALUES = 4

Strata = Union[Mapping[str, Sequence[float]], Sequence[Sequence[float]]]


@dataclass(frozen=True)
class RunSeries:
    """Evaluation curve of one (task, algorithm, seed) run."""
    task: str
    algorithm: str
    seed: int
    steps: Tuple[int, ...]
    returns: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        object.__setattr__(self, "returns", tuple(float(r) for r in self.returns))
        if not self.steps or len(self.steps) != len(self.returns):
            raise InvalidInputException(
                f"Invalid series {self.label}: steps and returns must be non-empty and aligned")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise InvalidInputException(f"Invalid series {self.label}: steps must increase strictly")
        if not all(math.isfinite(r) for r in self.returns):
            raise InvalidInputException(f"Invalid series {self.label}: returns must be finite")

    @property
    def label(self) -> str:
        """task/algorithm/seed."""
        return f"{self.task}/{self.algorithm}/seed{self.seed}"

    @property
    def final_return(self) -> float:
        """Return at the last evaluation point."""
        return self.returns[-1]

    @property
    def final_fraction_return(self) -> float:
        """Mean return over the final 20% of evaluation points (at least one)."""
        count = max(1, math.ceil(FINAL_FRACTION * len(self.returns)))
        return float(np.mean(self.returns[-count:]))

    def summary(self, kind: str) -> float:
        """Score of the run under a summary kind ('final' or 'final_20pct')."""
        if kind == "final":
            return self.final_return
        if kind == "final_20pct":
            return self.final_fraction_return
        raise InvalidInputException(f"Unknown summary '{kind}': must be one of {', '.join(SUMMARIES)}")


def minmax_normalize(scores, task_min: float, task_max: float) -> np.ndarray:
    """
    Maps scores to [0, 1] with (x - min) / (max - min), clamped.

    Raises:
        RatioDomainException: if max <= min.
    """
    if not task_max > task_min:
        raise RatioDomainException(
            f"Degenerate score range: max {task_max} must exceed min {task_min}")
    values = np.asarray(scores, dtype=float)
    return np.clip((values - task_min) / (task_max - task_min), 0.0, 1.0)


def _iqm_rows(matrix: np.ndarray) -> np.ndarray:
    # element i covers [i, i + 1]; keep its overlap with [n/4, 3n/4]
    count = matrix.shape[-1]
    position = np.arange(count)
    lower, upper = 0.25 * count, 0.75 * count
    weights = np.clip(np.minimum(position + 1, upper) - np.maximum(position, lower), 0.0, None)
    return np.sort(matrix, axis=-1) @ weights / (upper - lower)


def iqm(values) -> float:
    """
    Interquartile mean: the mean of the central 50% of the sorted values.

    When n/4 is fractional the boundary elements count with the fraction of
    them that lies inside the central half.

    Raises:
        InvalidInputException: on fewer than 4 values or non-finite values.
    """
    data = np.asarray(values, dtype=float).ravel()
    if data.size < IQM_MIN_VALUES:
        raise InvalidInputException(f"IQM needs at least {IQM_MIN_VALUES} values, got {data.size}")
    if not np.all(np.isfinite(data)):
        raise InvalidInputException("IQM values must be finite")
    return float(_iqm_rows(data))


def _strata_arrays(strata: Strata) -> List[np.ndarray]:
    groups = list(strata.values()) if isinstance(strata, Mapping) else list(strata)
    if not groups:
        raise InvalidInputException("Bootstrap needs at least one stratum")
    arrays = []
    for index, group in enumerate(groups):
        array = np.asarray(group, dtype=float).ravel()
        if array.size == 0:
            raise InvalidInputException(f"Empty stratum {index}")
        arrays.append(array)
    return arrays


def _check_bootstrap(resamples: int, level: float):
    if resamples < MIN_RESAMPLES:
        raise RatioDomainException(f"Invalid resamples: must be >= {MIN_RESAMPLES}")
    if not 0.0 < level < 1.0:
        raise RatioDomainException("Invalid level: must lie in (0, 1)")


def _percentiles(samples: np.ndarray, level: float) -> Tuple[float, float]:
    low, high = np.percentile(samples, [50.0 * (1.0 - level), 50.0 * (1.0 + level)])
    return float(low), float(high)


def bootstrap_ci(strata: Strata, statistic: Optional[Callable[[np.ndarray], float]] = None,
                 resamples: int = DEFAULT_RESAMPLES, level: float = DEFAULT_LEVEL,
                 seed: int = 0) -> Tuple[float, float]:
    """
    Stratified percentile bootstrap confidence interval.

    Each resample draws, with replacement, as many values from every stratum
    as it holds, pools them and recomputes the statistic.

    Args:
        strata: values grouped by stratum (task).
        statistic: pooled-values statistic; the IQM when omitted.
        resamples: number of bootstrap resamples, >= 1000.
        level: confidence level in (0, 1).
        seed: generator seed.

    Returns:
        tuple: (lower, upper) percentiles.
    """
    _check_bootstrap(resamples, level)
    arrays = _strata_arrays(strata)
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([group[rng.integers(group.size, size=(resamples, group.size))]
                             for group in arrays], axis=1)
    if statistic is None:
        if pooled.shape[1] < IQM_MIN_VALUES:
            raise InvalidInputException(f"IQM needs at least 4 values, got {pooled.shape[1]}")
        samples = _iqm_rows(pooled)
    else:
        samples = np.array([statistic(row) for row in pooled])
    return _percentiles(samples, level)


def probability_of_improvement(x_scores, y_scores) -> float:
    """
    Probability that a score drawn from x beats one drawn from y, ties counting 1/2.

    Raises:
        InvalidInputException: if either set is empty.
    """
    x_values = np.asarray(x_scores, dtype=float).ravel()
    y_values = np.asarray(y_scores, dtype=float).ravel()
    if x_values.size == 0 or y_values.size == 0:
        raise InvalidInputException("Probability of improvement needs non-empty score sets")
    difference = np.subtract.outer(x_values, y_values)
    wins = np.count_nonzero(difference > 0.0)
    ties = np.count_nonzero(difference == 0.0)
    return (wins + 0.5 * ties) / difference.size


def task_improvement(x_by_task: Mapping[str, Sequence[float]],
                     y_by_task: Mapping[str, Sequence[float]]) -> float:
    """Probability of improvement averaged over the tasks both algorithms ran."""
    tasks = sorted(set(x_by_task) & set(y_by_task))
    if not tasks:
        raise InvalidInputException("No task shared by both algorithms")
    return float(np.mean([probability_of_improvement(x_by_task[t], y_by_task[t]) for t in tasks]))


def task_improvement_ci(x_by_task: Mapping[str, Sequence[float]],
                        y_by_task: Mapping[str, Sequence[float]],
                        resamples: int = DEFAULT_RESAMPLES, level: float = DEFAULT_LEVEL,
                        seed: int = 0) -> Tuple[float, float]:
    """Bootstrap CI of task_improvement, resampling runs within each task."""
    _check_bootstrap(resamples, level)
    tasks = sorted(set(x_by_task) & set(y_by_task))
    if not tasks:
        raise InvalidInputException("No task shared by both algorithms")
    rng = np.random.default_rng(seed)
    samples = np.zeros(resamples)
    for task in tasks:
        x_values = np.asarray(x_by_task[task], dtype=float)
        y_values = np.asarray(y_by_task[task], dtype=float)
        x_draws = x_values[rng.integers(x_values.size, size=(resamples, x_values.size))]
        y_draws = y_values[rng.integers(y_values.size, size=(resamples, y_values.size))]
        difference = x_draws[:, :, None] - y_draws[:, None, :]
        wins = np.count_nonzero(difference > 0.0, axis=(1, 2))
        ties = np.count_nonzero(difference == 0.0, axis=(1, 2))
        samples += (wins + 0.5 * ties) / (x_values.size * y_values.size)
    return _percentiles(samples / len(tasks), level)


@dataclass(frozen=True)
class Estimate:
    """Point estimate with its confidence interval."""
    value: float
    lower: float
    upper: float

    def to_dict(self) -> Dict:
        """JSON-ready form."""
        return {"value": self.value, "lower": self.lower, "upper": self.upper}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Estimate":
        """Inverse of to_dict."""
        return cls(float(data["value"]), float(data["lower"]), float(data["upper"]))


@dataclass
class AggregateReport:
    """
    Per-summary IQM estimates and, for two or more algorithms, the
    probability-of-improvement matrix (row algorithm improves on column).

    statistic names the centre used per algorithm: "iqm", or "mean" when the
    algorithm has fewer than 4 runs.
    """
    algorithms: List[str]
    tasks: List[str]
    iqm: Dict[str, Dict[str, Estimate]] = field(default_factory=dict)
    improvement: Optional[Dict[str, Dict[str, Dict[str, Estimate]]]] = None
    statistic: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        """JSON-ready form; improvement is omitted for a single algorithm."""
        result = {
            "algorithms": list(self.algorithms),
            "tasks": list(self.tasks),
            "iqm": {kind: {alg: est.to_dict() for alg, est in per_alg.items()}
                    for kind, per_alg in self.iqm.items()},
            "statistic": dict(self.statistic),
        }
        if self.improvement is not None:
            result["improvement"] = {
                kind: {row: {col: est.to_dict() for col, est in cols.items()}
                       for row, cols in matrix.items()}
                for kind, matrix in self.improvement.items()}
        return result

    @classmethod
    def from_dict(cls, data: Mapping) -> "AggregateReport":
        """Inverse of to_dict."""
        improvement = None
        if "improvement" in data:
            improvement = {
                kind: {row: {col: Estimate.from_dict(est) for col, est in cols.items()}
                       for row, cols in matrix.items()}
                for kind, matrix in data["improvement"].items()}
        return cls(list(data["algorithms"]), list(data["tasks"]),
                   {kind: {alg: Estimate.from_dict(est) for alg, est in per_alg.items()}
                    for kind, per_alg in data["iqm"].items()},
                   improvement, dict(data.get("statistic", {})))


def normalized_scores(series: Sequence[RunSeries], kind: str) -> Dict[str, Dict[str, List[float]]]:
    """
    Per-algorithm, per-task normalized scores under one summary kind.

    A task on which every run scored the same has no range to normalize
    over; all of its runs score 1.0.

    Returns:
        dict: algorithm -> task -> normalized scores (one per seed).
    """
    raw: Dict[str, List[float]] = {}
    for run in series:
        raw.setdefault(run.task, []).append(run.summary(kind))
    bounds = {}
    for task, values in raw.items():
        low, high = min(values), max(values)
        if not high > low:
            logger.warning("Every %s run of task %s scored %s; normalizing it to 1.0",
                           kind, task, low)
        bounds[task] = (low, high)
    result: Dict[str, Dict[str, List[float]]] = {}
    for run in series:
        low, high = bounds[run.task]
        if high > low:
            score = float(minmax_normalize(run.summary(kind), low, high))
        else:
            score = 1.0
        result.setdefault(run.algorithm, {}).setdefault(run.task, []).append(score)
    return result


def _centre(scores: Mapping[str, Sequence[float]], resamples: int, level: float,
            seed: int) -> Tuple[str, Estimate]:
    strata = {t: scores[t] for t in sorted(scores)}
    pooled = np.concatenate([np.asarray(v, dtype=float) for v in strata.values()])
    if pooled.size >= IQM_MIN_VALUES:
        point, statistic, name = iqm(pooled), None, "iqm"
    else:
        point, statistic, name = float(np.mean(pooled)), np.mean, "mean"
    lower, upper = bootstrap_ci(strata, statistic=statistic, resamples=resamples, level=level,
                                seed=seed)
    return name, Estimate(point, min(lower, point), max(upper, point))


def aggregate(series: Sequence[RunSeries], resamples: int = DEFAULT_RESAMPLES,
              level: float = DEFAULT_LEVEL, seed: int = 0) -> AggregateReport:
    """
    IQM with stratified CIs per algorithm and the improvement matrix,
    for both the final and the final-20% summaries.

    An algorithm with fewer than 4 runs in total is summarized by the mean
    instead; report.statistic records which centre each algorithm got.

    Raises:
        InvalidInputException: on an empty series list.
    """
    if not series:
        raise InvalidInputException("No runs to aggregate")
    algorithms = sorted({run.algorithm for run in series})
    tasks = sorted({run.task for run in series})
    report = AggregateReport(algorithms, tasks)
    matrices = {}
    for kind in SUMMARIES:
        scores = normalized_scores(series, kind)
        report.iqm[kind] = {}
        for algorithm in algorithms:
            name, estimate = _centre(scores[algorithm], resamples, level, seed)
            report.iqm[kind][algorithm] = estimate
            report.statistic[algorithm] = name
        if len(algorithms) > 1:
            matrix = {}
            for row in algorithms:
                matrix[row] = {}
                for col in algorithms:
                    point = task_improvement(scores[row], scores[col])
                    lower, upper = task_improvement_ci(scores[row], scores[col],
                                                       resamples, level, seed)
                    matrix[row][col] = Estimate(point, min(lower, point), max(upper, point))
            matrices[kind] = matrix
    if matrices:
        report.improvement = matrices
    for algorithm, name in report.statistic.items():
        if name == "mean":
            logger.warning("%s has fewer than %d runs; reporting its mean instead of the IQM",
                           algorithm, IQM_MIN_VALUES)
    logger.info("Aggregated %d runs: %d algorithm(s), %d task(s)", len(series),
                len(algorithms), len(tasks))
    return report


def curve_bands(series: Sequence[RunSeries], resamples: int = DEFAULT_RESAMPLES,
                level: float = DEFAULT_LEVEL, seed: int = 0) -> List[Dict]:
    """
    Mean evaluation curve with a bootstrap CI band per (task, algorithm, step).

    Raises:
        ConfigValidationException: if seeds of one (task, algorithm) were
            evaluated at different steps.
    """
    _check_bootstrap(resamples, level)
    groups: Dict[Tuple[str, str], List[RunSeries]] = {}
    for run in series:
        groups.setdefault((run.task, run.algorithm), []).append(run)
    rows = []
    rng = np.random.default_rng(seed)
    for (task, algorithm), runs in sorted(groups.items()):
        steps = runs[0].steps
        for run in runs[1:]:
            if run.steps != steps:
                raise ConfigValidationException(
                    f"Incompatible evaluation steps: {run.label} differs from {runs[0].label}")
        curves = np.array([run.returns for run in runs])
        draws = rng.integers(len(runs), size=(resamples, len(runs)))
        means = curves[draws].mean(axis=1)
        for index, step in enumerate(steps):
            lower, upper = _percentiles(means[:, index], level)
            rows.append({"task": task, "algorithm": algorithm, "env_steps": step,
                         "mean": float(curves[:, index].mean()), "lower": lower, "upper": upper,
                         "num_runs": len(runs)})
    return rows


def load_run_series(run_dir: str) -> RunSeries:
    """
    Reads a trainer run directory into a RunSeries.

    The manifest's config hash is checked against config.json first.

    Raises:
        ConfigValidationException: if the run is missing files, fails the hash
            check, or has no evaluation point.
    """
    RunManifest.read(run_dir)
    config = config_from_dict(load_json_with_duplicate_check(os.path.join(run_dir, "config.json")))
    records = load_diagnostics(os.path.join(run_dir, "diagnostics.csv"))
    points = [(r.env_steps, r.eval_return) for r in records if r.eval_return is not None]
    if not points:
        raise ConfigValidationException(f"Run {run_dir} has no evaluation points")
    return RunSeries(config.env_name, config.trust_region.variant.value, config.seed,
                     tuple(p[0] for p in points), tuple(p[1] for p in points))


def probe_comparison(probe_documents: Sequence[Mapping]) -> List[Dict]:
    """One table row per collapse-probe result document."""
    rows = []
    for document in probe_documents:
        try:
            rows.append({"variant": document["trust_region"]["variant"],
                         "advantage": float(document["advantage"]),
                         "final_probability": float(document["final_probability"]),
                         "ratio_floor": float(document["ratio_floor"])})
        except (KeyError, TypeError) as exc:
            raise ConfigValidationException("Invalid probe result document") from exc
    return rows


def _write_csv(path: str, columns: Sequence[str], rows: Sequence[Mapping]):
    with open(path, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def _write_aggregate(out_dir: str, report: AggregateReport) -> List[str]:
    written = []
    path = os.path.join(out_dir, "aggregate.json")
    with open(path, "w", encoding="utf-8") as file:
        json.dump(report.to_dict(), file, indent=4, sort_keys=True)
    written.append(path)
    rows = [{"summary": kind, "algorithm": alg, "iqm": est.value, "ci_lower": est.lower,
             "ci_upper": est.upper, "statistic": report.statistic.get(alg, "iqm")}
            for kind, per_alg in report.iqm.items() for alg, est in per_alg.items()]
    path = os.path.join(out_dir, "aggregate.csv")
    _write_csv(path, ("summary", "algorithm", "iqm", "ci_lower", "ci_upper", "statistic"), rows)
    written.append(path)
    if report.improvement is not None:
        rows = [{"summary": kind, "algorithm_x": row, "algorithm_y": col,
                 "probability": est.value, "ci_lower": est.lower, "ci_upper": est.upper}
                for kind, matrix in report.improvement.items()
                for row, cols in matrix.items() for col, est in cols.items()]
        path = os.path.join(out_dir, "improvement.csv")
        _write_csv(path, ("summary", "algorithm_x", "algorithm_y", "probability",
                          "ci_lower", "ci_upper"), rows)
        written.append(path)
    return written


def write_report(out_dir: str, report: Optional[AggregateReport], curves: Sequence[Mapping] = (),
                 probes: Sequence[Mapping] = ()) -> List[str]:
    """
    Writes aggregate.json, aggregate.csv and improvement.csv (two or more
    algorithms) for a report, plus curves.csv and probes.csv when given.

    Returns:
        list: paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = _write_aggregate(out_dir, report) if report is not None else []
    if curves:
        path = os.path.join(out_dir, "curves.csv")
        _write_csv(path, ("task", "algorithm", "env_steps", "mean", "lower", "upper", "num_runs"),
                   curves)
        written.append(path)
    if probes:
        path = os.path.join(out_dir, "probes.csv")
        _write_csv(path, ("variant", "advantage", "final_probability", "ratio_floor"), probes)
        written.append(path)
    return written
