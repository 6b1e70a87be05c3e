"""
Command-line entry point.

    mars-ratio analyze --variant mars --adv 1 --r-range 0.01 3 300 --out curves
    mars-ratio verify --suite all --out report
    mars-ratio train --config configs/matrix_game_mars.json --seeds 0..4 --out runs
    mars-ratio report runs/seed_0 runs/seed_1 ... --probes probe/probe_mars.json --out report
    mars-ratio probe --variant mars --variant maspo --out probe

Exit codes: 0 success, 1 check failure or diverged training run, 2 usage or config error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np

from mars_ratio import __version__
from mars_ratio.metrics import (aggregate, curve_bands, load_run_series, probe_comparison,
                                write_report)
from mars_ratio.ratio_objective_exception import (ConfigValidationException,
                                                  NumericInstabilityException,
                                                  RatioObjectiveException)
from mars_ratio.run_config import RunManifest, load_config, load_json_with_duplicate_check
from mars_ratio.trainer import (COLLAPSE_ADVANTAGE, COLLAPSE_CALIBRATION, collapse_probe,
                                run_training)
from mars_ratio.trust_region import TrustRegionSpec, Variant, parse_variant, resolve
from mars_ratio.verify import SUITES, run_suite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_RUN_FAILED = 1
EXIT_USAGE = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def parse_seeds(text: str) -> List[int]:
    """'3' -> [3]; '0..4' -> [0, 1, 2, 3, 4]."""
    try:
        if ".." in text:
            first, last = (int(part) for part in text.split("..", 1))
        else:
            first = last = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid seed range '{text}': expected a..b") from exc
    if last < first:
        raise argparse.ArgumentTypeError(f"invalid seed range '{text}': b must be >= a")
    return list(range(first, last + 1))


def _parse_params(pairs: Optional[Sequence[str]]) -> dict:
    params = {}
    for pair in pairs or ():
        name, sep, value = pair.partition("=")
        if not sep:
            raise ConfigValidationException(f"Invalid --param '{pair}': expected name=value")
        try:
            params[name.strip()] = float(value)
        except ValueError as exc:
            raise ConfigValidationException(f"Invalid --param '{pair}': value must be a number") from exc
    return params


def _specs_for(args) -> List[TrustRegionSpec]:
    if args.config:
        return [load_config(args.config).trust_region]
    names = args.variant or ["mars"]
    if "all" in names:
        return [TrustRegionSpec.create(variant) for variant in Variant]
    params = _parse_params(args.param)
    if params and len(names) > 1:
        raise ConfigValidationException("--param needs exactly one --variant")
    try:
        return [TrustRegionSpec.create(parse_variant(name), **params) for name in names]
    except RatioObjectiveException as exc:
        raise ConfigValidationException(f"Invalid trust region: {exc.message}") from exc


def cmd_analyze(args) -> int:
    """Objective and ratio-gradient curves over a log-spaced ratio grid."""
    low, high, count = args.r_range
    count = int(count)
    if not 0.0 < low < high or count < 2:
        raise ConfigValidationException("Invalid --r-range: need 0 < lo < hi and count >= 2")
    grid = np.geomspace(low, high, count)
    os.makedirs(args.out, exist_ok=True)
    for spec in _specs_for(args):
        evaluation = resolve(spec, args.adv)(grid)
        objective = np.broadcast_to(evaluation.objective, grid.shape)
        gradient = np.broadcast_to(evaluation.ratio_gradient, grid.shape)
        path = os.path.join(args.out, f"curve_{spec.variant.value}.csv")
        with open(path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(("r", "objective", "ratio_gradient"))
            for row in zip(grid, objective, gradient):
                writer.writerow([repr(float(v)) for v in row])
        logger.info("Wrote %s", path)
    return EXIT_OK


def _mutated_penalty(r):
    return (np.asarray(r, dtype=float) - 1.0) ** 2


def cmd_verify(args) -> int:
    """Runs the check suites and writes verification.json."""
    report = run_suite(args.suite, args.seed, _mutated_penalty if args.corrupt_penalty else None)
    os.makedirs(args.out, exist_ok=True)
    report.write(os.path.join(args.out, "verification.json"))
    for failure in report.failures:
        print(f"FAIL {failure.suite}/{failure.name}: observed {failure.observed}, "
              f"expected {failure.expected}")
    print(f"{len(report.checks) - len(report.failures)}/{len(report.checks)} checks passed")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_train(args) -> int:
    """Trains one run per seed and writes the run artifacts."""
    if not args.config:
        raise ConfigValidationException("train needs --config")
    config = load_config(args.config)
    seeds = args.seeds or [args.seed if args.seed is not None else config.seed]
    for seed in seeds:
        run_config = config if seed == config.seed else replace(config, seed=seed)
        run_dir = os.path.join(args.out, f"seed_{seed}") if args.seeds else args.out
        RunManifest.create(args.config, run_config, run_dir).write(run_dir)
        result = run_training(run_config, run_dir)
        summary = result.summary()
        print(f"seed {seed}: final eval return {summary['final_eval_return']}, "
              f"final 20% {summary['final_20pct_eval_return']}, "
              f"min ratio {summary['min_ratio']} -> {run_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Aggregates run artifacts (and probe results) into report files."""
    if not args.runs and not args.probes:
        raise ConfigValidationException("report needs at least one run directory or --probes file")
    series = [load_run_series(run_dir) for run_dir in args.runs]
    seed = args.seed if args.seed is not None else 0
    probes = probe_comparison([load_json_with_duplicate_check(path) for path in args.probes or ()])
    report = aggregate(series, seed=seed) if series else None
    curves = curve_bands(series, seed=seed) if series else []
    for path in write_report(args.out, report, curves, probes):
        print(path)
    return EXIT_OK


def cmd_probe(args) -> int:
    """Collapse probe per variant: JSON result plus a probability trajectory CSV."""
    os.makedirs(args.out, exist_ok=True)
    for spec in _specs_for(args):
        calibration = None if args.self_calibrated else args.calibration
        result = collapse_probe(spec, steps=args.steps, learning_rate=args.lr, advantage=args.adv,
                                calibration=calibration,
                                epochs_per_update=args.epochs_per_update)
        stem = os.path.join(args.out, f"probe_{spec.variant.value}")
        with open(stem + ".json", "w", encoding="utf-8") as file:
            json.dump(result.to_dict(), file, indent=4)
        with open(stem + ".csv", "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(("step", "probability"))
            for step, probability in enumerate(result.probabilities):
                writer.writerow((step, repr(float(probability))))
        print(f"{spec.variant.value}: final probability {result.final_probability:.3e}, "
              f"ratio floor {result.ratio_floor:.4f}")
    return EXIT_OK


def _global_options(parser: argparse.ArgumentParser, suppress: bool):
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--out", default=default("out"), help="output directory")
    parser.add_argument("--seed", type=int, default=default(None), help="seed override")
    parser.add_argument("--config", default=default(None), help="run-config JSON file")
    parser.add_argument("--log-level", default=default("INFO"),
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def build_parser() -> argparse.ArgumentParser:
    """Parser with the five subcommands; global flags work before or after the command."""
    # subcommand copies must not overwrite values given before the command
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)

    parser = argparse.ArgumentParser(prog="mars-ratio",
                                     description="Ratio-objective trust-region toolkit")
    _global_options(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def variant_options(sub):
        sub.add_argument("--variant", action="append",
                         choices=[v.value for v in Variant] + ["all"],
                         help="objective variant (repeatable, or 'all')")
        sub.add_argument("--param", action="append", metavar="NAME=VALUE",
                         help="boundary parameter of the single --variant")

    analyze = commands.add_parser("analyze", parents=[common], help="objective curves")
    variant_options(analyze)
    analyze.add_argument("--adv", type=float, default=1.0)
    analyze.add_argument("--r-range", type=float, nargs=3, default=(0.01, 3.0, 300),
                         metavar=("LO", "HI", "COUNT"))
    analyze.set_defaults(handler=cmd_analyze)

    verify = commands.add_parser("verify", parents=[common], help="run check suites")
    verify.add_argument("--suite", default="all", choices=SUITES + ("all",))
    verify.add_argument("--corrupt-penalty", action="store_true", help=argparse.SUPPRESS)
    verify.set_defaults(handler=cmd_verify)

    train = commands.add_parser("train", parents=[common], help="train from a config file")
    train.add_argument("--seeds", type=parse_seeds, default=None, metavar="A..B")
    train.set_defaults(handler=cmd_train)

    report = commands.add_parser("report", parents=[common], help="aggregate run artifacts")
    report.add_argument("runs", nargs="*", help="run artifact directories")
    report.add_argument("--probes", nargs="*", default=None, help="probe result JSON files")
    report.set_defaults(handler=cmd_report)

    probe = commands.add_parser("probe", parents=[common], help="collapse probe")
    variant_options(probe)
    probe.add_argument("--steps", type=int, default=500)
    probe.add_argument("--lr", type=float, default=0.05)
    probe.add_argument("--adv", type=float, default=COLLAPSE_ADVANTAGE,
                       help="injected advantage")
    probe.add_argument("--calibration", type=float, default=COLLAPSE_CALIBRATION,
                       help="advantage the penalty weight is calibrated at")
    probe.add_argument("--self-calibrated", action="store_true",
                       help="calibrate at the injected advantage instead")
    probe.add_argument("--epochs-per-update", type=int, default=None,
                       help="refresh pi_old this often (default: never)")
    probe.set_defaults(handler=cmd_probe)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parses arguments, runs the command and maps errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    if args.command == "verify" and args.seed is None:
        args.seed = 0
    try:
        return args.handler(args)
    except NumericInstabilityException as exc:
        logger.error("Training diverged: %s", exc.message)
        print(f"error: {exc.message}", file=sys.stderr)
        return EXIT_RUN_FAILED
    except RatioObjectiveException as exc:
        logger.error("%s", exc.message)
        print(f"error: {exc.message}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
