"""Command-line front end: ``evaluate``, ``slate``, ``learn`` and ``selftest``.

Exit codes: 0 success, 1 selftest failure, 2 configuration error,
3 data ingestion failure (including slate span or rank errors).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, DatasetRef, load_config
from .core import load_multiclass_csv
from .errors import DataFormatError, EmptyDataset, RankDeficient, SpanViolation
from .rng import child_seed
from .learning import LEARNING_REPORT_HEADER, LearningExperiment, run_learning
from .selection import SELECTION_HEADER
from .simulation import (
    ExperimentCondition,
    PolicySpec,
    make_synthetic_multiclass,
    prepare_environment,
    run_condition,
    selection_report,
    write_cdf_csv,
    write_results_csv,
    write_ttest_csv,
)
from .slate import read_relevance_csv, write_slate_log_csv
from .slate_experiment import (
    SlateCondition,
    log_slates,
    make_synthetic_queries,
    prepare_slate_world,
    run_slate_condition,
    write_slate_results_csv,
)

log = logging.getLogger("ope_shrink")

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class DataError(Exception):
    pass


def _threads(args, cfg) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("OPE_SHRINK_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"OPE_SHRINK_THREADS: not an integer ({env!r})") from exc
        if n < 1:
            raise ConfigError("OPE_SHRINK_THREADS: must be >= 1")
        return n
    return cfg.threads


def _seed(args, cfg) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise ConfigError("seed: no seed given (set 'seed' in the config or pass --seed)")
    return int(seed)


def _out(args, cfg) -> Path:
    out = args.out if args.out is not None else cfg.output_dir
    if out is None:
        raise ConfigError("output_dir: no output directory (set 'output_dir' or pass --out)")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_dataset(ref: DatasetRef):
    if ref.synthetic is not None:
        s = ref.synthetic
        return make_synthetic_multiclass(s.n, s.k, s.d, s.separation, s.seed)
    try:
        return load_multiclass_csv(ref.path, ref.sidecar)
    except (DataFormatError, EmptyDataset) as exc:
        raise DataError(str(exc)) from exc


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, "evaluate")
    seed, out, threads = _seed(args, cfg), _out(args, cfg), _threads(args, cfg)
    target = PolicySpec(cfg.target_policy.base, cfg.target_policy.alpha, cfg.target_policy.beta)
    results = []
    sel_rows = []
    for di, ref in enumerate(cfg.datasets):
        data = _load_dataset(ref)
        env = prepare_environment(data, ref.id, seed=child_seed(seed, 2000 + di), holdout_frac=cfg.holdout_frac, reg=cfg.reg)
        ci = 0
        for lp in cfg.logging_policies:
            for mode in cfg.reward_modes:
                for n in cfg.n_values:
                    cond = ExperimentCondition(ref.id, PolicySpec(lp.base, lp.alpha, lp.beta), target, mode, n,
                                               cfg.replicates, seed=child_seed(seed, 1000 + di, ci))
                    ci += 1
                    log.info("condition %s (%d replicates)", cond.condition_id, cond.replicates)
                    results.append(run_condition(env, cond, cfg.estimators, threads, cfg.truth_on, cfg.reg))
                    specs, scores, chosen = selection_report(env, cond, cfg.selection_mode, reg=cfg.reg)
                    for i, (spec, s) in enumerate(zip(specs, scores)):
                        sel_rows.append([cond.condition_id, spec.spec_id, spec.predictor, spec.kind, repr(spec.lam),
                                         repr(s.bias_ub), repr(s.variance_hat), repr(s.objective), int(i == chosen)])
    write_results_csv(results, out / "results.csv")
    write_ttest_csv(results, out / "ttests.csv")
    write_cdf_csv(results, out / "cdf.csv")
    with (out / "selection_report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition_id"] + SELECTION_HEADER)
        w.writerows(sel_rows)
    log.info("wrote %d conditions to %s", len(results), out)
    return EXIT_OK


def cmd_slate(args) -> int:
    cfg = load_config(args.config, "slate")
    seed, out = _seed(args, cfg), _out(args, cfg)
    if cfg.synthetic is not None:
        s = cfg.synthetic
        queries = make_synthetic_queries(s.n_queries, s.docs_per_query, s.n_features, s.seed)
    else:
        try:
            queries = read_relevance_csv(cfg.relevance_csv)
        except DataFormatError as exc:
            raise DataError(str(exc)) from exc
    try:
        world = prepare_slate_world(queries, cfg.l, cfg.m, seed, cfg.train_frac, cfg.reg)
    except (SpanViolation, RankDeficient, DataFormatError) as exc:
        raise DataError(str(exc)) from exc
    log.info("basis size: %d (l=%d, m=%d)", world.basis.size, cfg.l, cfg.m)
    results = []
    for mode in cfg.reward_modes:
        for pred in cfg.predictors:
            cond = SlateCondition(mode, pred, tuple(cfg.n_values), cfg.replicates, seed, cfg.reg)
            res = run_slate_condition(world, cond)
            log.info("slate %s/%s: truth %.6f", mode, pred, res.truth)
            results.append(res)
    write_slate_results_csv(results, out / "slate_mse.csv")
    sample = log_slates(world, max(cfg.n_values), cfg.reward_modes[0], seed)
    write_slate_log_csv(sample, out / "slate_log.csv", world.query_ids)
    (out / "slate_summary.json").write_text(json.dumps(
        {"basis_size": world.basis.size, "l": cfg.l, "m": cfg.m, "bandit_queries": world.n_queries,
         "truth": {m: world.truth(m) for m in cfg.reward_modes}}, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_learn(args) -> int:
    cfg = load_config(args.config, "learn")
    seed, out = _seed(args, cfg), _out(args, cfg)
    data = _load_dataset(cfg.dataset)
    exp = LearningExperiment(tuple(cfg.gammas), cfg.lam_values, cfg.reward_mode, cfg.logging_alpha, cfg.step,
                             cfg.max_iter, seed, cfg.reg)
    res = run_learning(data, exp)
    (out / "learned_policy.json").write_text(res.chosen.to_json(res.feature_dim))
    with (out / "learning_report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEARNING_REPORT_HEADER)
        for row in res.rows:
            method, pred, kind, lam, gamma, v, nv = row
            w.writerow([method, pred, kind, "inf" if math.isinf(lam) else repr(lam), repr(gamma), repr(v), repr(nv)])
    return EXIT_OK


def cmd_selftest(args) -> int:
    """Quick internal consistency checks; prints one line per check."""
    from .estimators import WeightMap, drs_estimate, dm_estimate, dr_estimate, ips_estimate
    from .exact import AtomicInstance, exact_mean_var, tabular_predictor
    from .slate import build_basis

    checks = []
    inst = AtomicInstance(np.full(3, 1 / 3), np.array([[.5, .3, .2], [.2, .2, .6], [1 / 3, 1 / 3, 1 / 3]]),
                          np.array([[.1, .1, .8], [.7, .2, .1], [0., 1., 0.]]),
                          np.array([[1., 0., 1.], [0., 1., 0.], [1., 1., 0.]]))
    pred = tabular_predictor(np.full((3, 3), 0.4))
    mean, _ = exact_mean_var(inst.outcome_probs(), 2, lambda s: ips_estimate(inst.logged(s), inst.target).value)
    checks.append(("IPS unbiased on enumerable instance", abs(mean - inst.true_value()) <= 1e-12))
    d = inst.logged((0, 4, 8))
    checks.append(("DRos at lam=0 equals DM", drs_estimate(d, inst.target, pred, WeightMap("optimistic", 0.0)).value
                   == dm_estimate(d, inst.target, pred).value))
    checks.append(("DRps at lam=inf equals DR", drs_estimate(d, inst.target, pred, WeightMap("pessimistic", math.inf))
                   .value == dr_estimate(d, inst.target, pred).value))
    checks.append(("basis for l=5, m=20 has 96 slates", build_basis(5, 20).size == 96))
    ok = True
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        ok &= passed
    return EXIT_OK if ok else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ope-shrink", description="Off-policy evaluation with weight shrinkage")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("evaluate", "atomic-action evaluation experiments"),
                           ("slate", "slate (ranking) evaluation experiments"),
                           ("learn", "off-policy learning experiment")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        sp.add_argument("--out", default=None, help="output directory (overrides the config)")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: OPE_SHRINK_THREADS or 1)")
        sp.add_argument("-v", "--verbose", action="store_true")
    st = sub.add_parser("selftest", help="run quick consistency checks")
    st.add_argument("-v", "--verbose", action="store_true")
    return p


_COMMANDS = {"evaluate": cmd_evaluate, "slate": cmd_slate, "learn": cmd_learn, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise ConfigError("threads: must be >= 1")
        if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
