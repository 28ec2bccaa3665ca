"""``trialbridge estimate`` and ``trialbridge simulate``.

Machine-readable output goes to stdout (or ``--out``); logs go to stderr.
Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .basis import Degree
from .data import load_csv_pair
from .estimators import Estimator, EstimatorConfig, estimate
from .exceptions import DataValidationError, SolverError
from .regression import OutcomeMode
from .simulation import (
    Scenario,
    ScenarioConfig,
    json_safe,
    run_monte_carlo,
    summaries_to_json,
    write_replicates_csv,
    write_summary_csv,
)
from .variance import bootstrap_variance

log = logging.getLogger("trialbridge")

EXIT_OK, EXIT_DATA, EXIT_SOLVER = 0, 2, 3
DEFAULT_ESTIMATE_B = 200
DEFAULT_SIMULATE_B = 50

_BASIS = {"linear": Degree.LINEAR, "quadratic": Degree.QUADRATIC}
_MODES = {"trial-only": OutcomeMode.TRIAL_ONLY, "pooled": OutcomeMode.POOLED_RWE}


def parse_xi_grid(text: Optional[str]) -> Optional[tuple[float, ...]]:
    """``lo:hi:points`` (log-spaced) or a single value such as ``0``."""
    if text is None:
        return None
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return (float(parts[0]),)
        if len(parts) != 3:
            raise ValueError
        lo, hi, points = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise DataValidationError(f"--xi-grid expects lo:hi:points, got {text!r}") from None
    if points < 1 or not 0 < lo <= hi:
        raise DataValidationError(f"--xi-grid needs 0 < lo <= hi and points >= 1, got {text!r}")
    return tuple(float(v) for v in np.geomspace(lo, hi, points))


def _estimators(choice: str) -> list[Estimator]:
    if choice == "all":
        return list(Estimator)
    return [Estimator.parse(choice)]


def _build_configs(args, mode: OutcomeMode, seed: int) -> list[EstimatorConfig]:
    degree = _BASIS[args.basis] if args.basis else None
    grid = parse_xi_grid(args.xi_grid)
    return [EstimatorConfig(e, degree=degree, outcome_mode=mode, xi_grid=grid, cv_seed=seed)
            for e in _estimators(args.estimator)]


def _resolve_seed(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    seed = int(np.random.SeedSequence().generate_state(1)[0])
    log.warning("no --seed given; using generated seed %d", seed)
    return seed


def _threads(value: Optional[int]) -> int:
    if value is None:
        return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if value < 1:
        raise DataValidationError(f"--threads must be positive, got {value}")
    return value


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text + "\n")


def cmd_estimate(args) -> int:
    seed = _resolve_seed(args.seed)
    threads = _threads(args.threads)
    B = DEFAULT_ESTIMATE_B if args.bootstrap is None else args.bootstrap
    if B != 0 and B < 2:
        raise DataValidationError(f"--bootstrap must be 0 or at least 2, got {B}")
    dataset = load_csv_pair(args.rct, args.rwe, args.outcome_type, known_pi_a=args.pi_a)
    configs = _build_configs(args, _MODES[args.outcome_mode], seed)
    reports = [estimate(dataset, c) for c in configs]
    boots = bootstrap_variance(dataset, configs, B, seed, threads) if B else [None] * len(configs)
    payload = []
    for report, boot in zip(reports, boots):
        if boot is not None:
            report = report.with_se(boot.se)
        item = report.to_dict()
        item["seed"] = seed
        item["bootstrap"] = None if boot is None else boot.to_dict()
        item["data"] = {"n": dataset.n, "m": dataset.m, "outcome_type": dataset.outcome_type.value,
                        "covariates": list(dataset.schema.names)}
        payload.append(item)
    body = payload if args.estimator == "all" else payload[0]
    _emit(json.dumps(json_safe(body), indent=2, sort_keys=True), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args.seed)
    threads = _threads(args.threads)
    if args.reps is not None and args.reps < 2:
        raise DataValidationError(f"--reps must be at least 2, got {args.reps}")
    B = DEFAULT_SIMULATE_B if args.bootstrap is None else args.bootstrap
    scenarios = list(Scenario) if args.scenario == "all" else [Scenario.parse(args.scenario)]
    configs = _build_configs(args, _MODES[args.outcome_mode], seed)
    overrides = dict(outcome_type=args.outcome, B=B, seed=seed)
    if args.reps is not None:
        overrides["reps"] = args.reps
    summaries = []
    for sc in scenarios:
        base = (ScenarioConfig.large_n(scenario=sc, **overrides) if args.preset == "large-n"
                else ScenarioConfig(scenario=sc, **overrides))
        log.info("running %s (%d reps, B=%d)", sc.value, base.reps, base.B)
        summaries.append(run_monte_carlo(base, configs, threads))

    if args.out:
        out = Path(args.out)
        with open(out, "w", newline="", encoding="utf-8") as fh:
            write_summary_csv(summaries, fh)
        out.with_suffix(".json").write_text(summaries_to_json(summaries, seed) + "\n",
                                            encoding="utf-8")
    else:
        sys.stdout.write(summaries_to_json(summaries, seed) + "\n")
    if args.dump_replicates:
        if args.dump_replicates is True:
            if not args.out:
                raise DataValidationError("--dump-replicates needs a path when --out is not given")
            dump = Path(args.out).with_name(Path(args.out).stem + "_replicates.csv")
        else:
            dump = Path(args.dump_replicates)
        with open(dump, "w", newline="", encoding="utf-8") as fh:
            write_replicates_csv(summaries, fh)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trialbridge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_mode):
        p.add_argument("--estimator", default="all",
                       choices=["naive", "ipsw", "cw", "acw", "acw-sieve", "all"])
        p.add_argument("--basis", choices=sorted(_BASIS),
                       help="basis for every estimator (default: linear, quadratic for acw-sieve)")
        p.add_argument("--outcome-mode", choices=sorted(_MODES), default=default_mode)
        p.add_argument("--bootstrap", type=int, metavar="B")
        p.add_argument("--seed", type=int)
        p.add_argument("--xi-grid", metavar="LO:HI:POINTS",
                       help="calibration SCAD grid for acw-sieve (log-spaced)")
        p.add_argument("--out", metavar="PATH")
        p.add_argument("--threads", type=int, metavar="T")

    est = sub.add_parser("estimate", help="estimate the ATE from a pair of CSV files")
    est.add_argument("--rct", required=True, metavar="PATH")
    est.add_argument("--rwe", required=True, metavar="PATH")
    est.add_argument("--outcome-type", choices=["continuous", "binary"], default="continuous")
    est.add_argument("--pi-a", type=float, metavar="P",
                     help="known trial treatment probability (default: observed arm share)")
    common(est, "trial-only")
    est.set_defaults(func=cmd_estimate)

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    sim.add_argument("--scenario", choices=["1", "2", "3", "4", "all"], default="all")
    sim.add_argument("--outcome", choices=["continuous", "binary"], default="continuous")
    sim.add_argument("--reps", type=int, metavar="R")
    sim.add_argument("--preset", choices=["default", "large-n"], default="default")
    sim.add_argument("--dump-replicates", nargs="?", const=True, default=None, metavar="PATH",
                     help="also write per-replicate estimates (default: next to --out)")
    common(sim, "pooled")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
