"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are written
to the terminal even when output capture is on.
"""
import json
import math
import time

import numpy as np
import pytest

from ope_shrink.cli import main
from ope_shrink.estimators import WeightMap, dm_estimate, dr_estimate, drs_estimate, ips_estimate, switch_dr_estimate
from ope_shrink.exact import AtomicInstance, SlateInstance, enumerate_iid, exact_mean_var, tabular_predictor
from ope_shrink.learning import LearningConfig, LearningProblem, learning_gradient, learning_objective
from ope_shrink.reward_model import SCHEMES, RewardPredictor
from ope_shrink.selection import sample_variance_of_mean
from ope_shrink.simulation import (
    LOGGING_POLICIES,
    TARGET_POLICY,
    ExperimentCondition,
    fit_predictors,
    make_synthetic_multiclass,
    prepare_environment,
    run_condition,
    supervised_to_bandit,
)
from ope_shrink.slate import build_basis, pseudo_inverse_weight_vector
from ope_shrink.slate_experiment import SlateCondition, make_synthetic_queries, prepare_slate_world, run_slate_condition

from conftest import random_logged


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return report


# ---------------------------------------------------------------- shared instances

ATOMIC = AtomicInstance(
    p_x=np.array([0.2, 0.5, 0.3]),
    mu=np.array([[0.5, 0.3, 0.2], [0.2, 0.2, 0.6], [1 / 3, 1 / 3, 1 / 3]]),
    pi=np.array([[0.1, 0.1, 0.8], [0.7, 0.2, 0.1], [0.0, 1.0, 0.0]]),
    eta=np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]),
)
ETA_HATS = [np.zeros((3, 3)), np.full((3, 3), 0.5),
            np.array([[0.6, 0.2, 0.5], [0.1, 0.7, 0.3], [0.9, 0.4, 0.2]]), ATOMIC.eta.copy()]
LAMBDA_GRID_10 = np.array([0.0, 0.01, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, math.inf])


def _slate_instance():
    rng = np.random.default_rng(7)
    basis = build_basis(2, 3)
    s = basis.size
    mu = 0.6 * rng.dirichlet(np.ones(s), size=2) + 0.4 / s
    q = rng.dirichlet(np.ones(s), size=2) @ basis.B.T
    eta = rng.random((2, 6)) / 2  # r = eta . a in [0, 1]
    return SlateInstance(basis, np.array([0.45, 0.55]), mu, q, eta)


# criteria 6 and 7 share one set of runs
DATASETS = {"syn-a": (4000, 4, 8, 1.0, 1), "syn-b": (4000, 6, 10, 1.2, 2)}
CONDITION_LOGGINGS = (LOGGING_POLICIES[0], LOGGING_POLICIES[3], LOGGING_POLICIES[5])
ROSTER = ("dm:w_sq", "dr", "drs-direct", "drs-oracle")


@pytest.fixture(scope="module")
def synthetic_conditions():
    t0 = time.perf_counter()
    results = []
    for name, (n, k, d, sep, seed) in DATASETS.items():
        env = prepare_environment(make_synthetic_multiclass(n, k, d, sep, seed=seed), name, seed=3)
        for lp in CONDITION_LOGGINGS:
            cond = ExperimentCondition(name, lp, TARGET_POLICY, "deterministic", n=2000, replicates=500, seed=11)
            results.append(run_condition(env, cond, ROSTER))
    return results, time.perf_counter() - t0


# ---------------------------------------------------------------- criteria


def test_criterion_01_unbiasedness(verdict):
    t0 = time.perf_counter()
    truth = ATOMIC.true_value()
    probs = ATOMIC.outcome_probs()
    worst = 0.0
    mean_ips, _ = exact_mean_var(probs, 2, lambda s: ips_estimate(ATOMIC.logged(s), ATOMIC.target).value)
    worst = max(worst, abs(mean_ips - truth))
    for eh in ETA_HATS:
        pred = tabular_predictor(eh)
        mean_dr, _ = exact_mean_var(probs, 2, lambda s: dr_estimate(ATOMIC.logged(s), ATOMIC.target, pred).value)
        worst = max(worst, abs(mean_dr - truth))
    elapsed = time.perf_counter() - t0
    n_seq = sum(1 for _ in enumerate_iid(probs, 2))
    verdict(1, worst <= 1e-12 and elapsed < 1.0,
            f"max |E[V_hat] - V| = {worst:.2e} over IPS and {len(ETA_HATS)} DR predictors "
            f"({n_seq} sequences, {elapsed:.2f}s)")


def test_criterion_02_endpoint_identities(verdict):
    failures, checked = [], 0
    for name, (n, k, d, sep, seed) in DATASETS.items():
        env = prepare_environment(make_synthetic_multiclass(n, k, d, sep, seed=seed), name, seed=3)
        target = env.policy(TARGET_POLICY)
        data = supervised_to_bandit(env.pool, env.policy(LOGGING_POLICIES[3]), 1000, seed=4)
        train, ev = data[:500], data[500:]
        for s, (pred, _) in fit_predictors(train, target, SCHEMES, seed=5).items():
            dm = dm_estimate(ev, target, pred).value
            dr = dr_estimate(ev, target, pred).value
            for kind in ("optimistic", "pessimistic"):
                checked += 2
                if drs_estimate(ev, target, pred, WeightMap(kind, 0.0)).value != dm:
                    failures.append(f"{name}/{s}/{kind}/0")
                if drs_estimate(ev, target, pred, WeightMap(kind, math.inf)).value != dr:
                    failures.append(f"{name}/{s}/{kind}/inf")
            checked += 1
            if switch_dr_estimate(ev, target, pred, math.inf).value != dr:
                failures.append(f"{name}/{s}/switch/inf")
    verdict(2, not failures, f"{checked} bitwise identities checked, failures: {failures or 'none'}")


def test_criterion_03_second_moment_proxy(verdict):
    t0 = time.perf_counter()
    probs = ATOMIC.outcome_probs()
    n = 2
    worst_ratio = 0.0
    for eh in ETA_HATS:
        pred = tabular_predictor(eh)
        resid = ATOMIC.eta - eh
        w_all = ATOMIC.pi / ATOMIC.mu
        for kind in ("optimistic", "pessimistic"):
            for lam in LAMBDA_GRID_10:
                wm = WeightMap(kind, lam)
                proxy = float(np.sum(probs * (wm(w_all) * resid).ravel() ** 2))
                # V_hat is the mean of per-outcome terms, so each outcome is estimated once
                z = np.array([drs_estimate(ATOMIC.logged((o,)), ATOMIC.target, pred, wm).value
                              for o in range(len(probs))])
                _, var = exact_mean_var(probs, n, lambda s: float(np.mean(z[list(s)])))
                worst_ratio = max(worst_ratio, abs(var - proxy / n) / (1.0 / n))
    elapsed = time.perf_counter() - t0
    verdict(3, worst_ratio <= 1.0 and elapsed < 1.0,
            f"max |Var - proxy/n| = {worst_ratio:.3f} / n over 2 kinds x 10 lambdas x {len(ETA_HATS)} predictors "
            f"({elapsed:.2f}s)")


def test_criterion_04_slate_proxy_and_weights(verdict):
    t0 = time.perf_counter()
    inst = _slate_instance()
    states = inst.states()
    B = inst.basis.B
    probs = inst.outcome_probs()
    bound = inst.expected_v_l1_sq()
    n = 2
    worst = 0.0
    eta_hat = np.full_like(inst.eta, 0.15)
    s = inst.basis.size
    w = np.array([st.weights for st in states])  # (C, s)
    resid = inst.eta @ B - eta_hat @ B  # (C, s): r - eta_hat . a for every basis slate
    dm = np.sum(eta_hat * inst.q, axis=1)
    for lam in np.concatenate([[0.0], np.geomspace(1e-3, 1e3, 13), [math.inf]]):
        w_hat = WeightMap("optimistic", lam)(w)
        z = (dm[:, None] + w_hat * resid).ravel()  # per-outcome term, index c*s + j
        proxy = float(np.sum(probs * (w_hat * resid).ravel() ** 2))
        _, var = exact_mean_var(probs, n, lambda seq: float(np.mean(z[list(seq)])))
        worst = max(worst, abs(n * var - proxy))
    # closed-form weights against the explicit pseudo-inverse
    werr = 0.0
    for c, st in enumerate(states):
        oracle = B.T @ pseudo_inverse_weight_vector(inst.basis, inst.mu[c], inst.q[c])
        werr = max(werr, float(np.max(np.abs(st.weights - oracle))))
    elapsed = time.perf_counter() - t0
    verdict(4, worst <= bound and werr <= 1e-8 and elapsed < 5.0,
            f"max |n Var - proxy| = {worst:.4f} <= E||v||_1^2 = {bound:.4f}; weight error {werr:.1e} "
            f"(s = {s}, {elapsed:.2f}s)")


def test_criterion_05_basis_size(verdict):
    b = build_basis(5, 20)
    ok = b.size == 96 and np.linalg.matrix_rank(b.B) == 96
    rng = np.random.default_rng(2024)
    pairs = []
    while len(pairs) < 10:
        l = int(rng.integers(1, 7))
        m = int(rng.integers(l + 1, 16))
        pairs.append((l, m))
    bad = []
    for l, m in pairs:
        bb = build_basis(l, m)
        if bb.size != 1 + l * (m - 1) or np.linalg.matrix_rank(bb.B) != bb.size:
            bad.append((l, m))
    verdict(5, ok and not bad, f"build_basis(5, 20) has {b.size} independent slates; "
                               f"10 random pairs {pairs} mismatches: {bad or 'none'}")


def test_criterion_06_oracle_dominance(verdict, synthetic_conditions):
    results, elapsed = synthetic_conditions
    lines, ok = [], True
    for res in results:
        se = res.clipped_squared_errors()
        col = {nm: j for j, nm in enumerate(res.names)}
        per_rep = np.all(se[:, col["drs-oracle"]] <= np.minimum(se[:, col["dm:w_sq"]], se[:, col["dr"]]))
        orc = res.clipped_mse("drs-oracle")
        base = min(res.clipped_mse("dm:w_sq"), res.clipped_mse("dr"))
        ok &= bool(per_rep) and orc <= base
        lines.append(f"{orc:.2e}<={base:.2e}")
    verdict(6, ok and elapsed < 120, f"oracle vs min(DM, DR) clipped MSE: {', '.join(lines)} ({elapsed:.1f}s)")


def test_criterion_07_model_selection(verdict, synthetic_conditions):
    results, _ = synthetic_conditions
    ratios = [res.clipped_mse("drs-direct") / res.clipped_mse("dr") for res in results]
    passed = sum(r <= 1.25 for r in ratios)
    verdict(7, passed >= 5, f"DRs-direct / DR clipped MSE ratios {[round(r, 3) for r in ratios]}; "
                            f"{passed}/6 within 1.25")


def test_criterion_08_variance_estimator(verdict):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        z = rng.normal(size=int(rng.integers(2, 60)))
        n = len(z)
        u = np.sum((z[:, None] - z[None, :]) ** 2) / (2 * n * (n - 1))
        worst = max(worst, abs(sample_variance_of_mean(z) - u / n))
    # Z ~ Unif[0, 1]: Var = 1/12
    draws = np.array([sample_variance_of_mean(rng.random(50)) for _ in range(5000)])
    target = 1 / 12 / 50
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    dev = abs(draws.mean() - target)
    verdict(8, worst <= 1e-12 and dev <= 3 * se,
            f"O(n) vs pairwise max error {worst:.1e}; mean {draws.mean():.6e} vs Var/n {target:.6e} "
            f"({dev / se:.2f} SE)")


def test_criterion_09_gradient(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    data, _ = random_logged(rng, 80, 3, 3)
    pred = RewardPredictor(rng.normal(size=3 * 4) * 0.3, 3)
    prob = LearningProblem(data, pred)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        u = rng.normal(size=prob.dim)
        for kind in ("optimistic", "pessimistic"):
            for lam in (0.0, 1.0, math.inf):
                cfg = LearningConfig("x", kind, lam, gamma=0.01)
                g = learning_gradient(u, prob, cfg)
                fd = np.array([(learning_objective(u + h * e, prob, cfg) - learning_objective(u - h * e, prob, cfg))
                               / (2 * h) for e in np.eye(prob.dim)])
                worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    elapsed = time.perf_counter() - t0
    verdict(9, worst <= 1e-5 and elapsed < 10, f"max relative error {worst:.2e} over 20 points x 2 kinds x "
                                               f"3 lambdas ({elapsed:.2f}s)")


def test_criterion_10_slate_shrinkage(verdict):
    queries = make_synthetic_queries(400, 30, 10, seed=5)
    world = prepare_slate_world(queries, 2, 5, seed=1)
    ok_every, strong = True, set()
    lines = []
    for mode in ("deterministic", "stochastic"):
        for pred in ("ridge_all", "ridge_5"):
            res = run_slate_condition(world, SlateCondition(mode, pred, (500, 2000), 20, seed=3))
            for n in (500, 2000):
                orc, dr = res.mse(n, "drs-pi-oracle"), res.mse(n, "dr-pi")
                ok_every &= orc <= dr
                lines.append(f"{mode[:4]}/{pred}/n={n}: {dr / orc:.1f}x")
                if n == 500 and orc <= dr / 1.5:
                    strong.add(mode)
    verdict(10, ok_every and bool(strong), f"DR-PI / oracle DRs-PI MSE: {'; '.join(lines)}")


CLI_CONFIGS = {
    "evaluate": {"schema_version": 1, "seed": 13,
                 "datasets": [{"id": "syn", "synthetic": {"n": 800, "k": 3, "d": 6, "seed": 1}}],
                 "logging_policies": [{"base": "pi2", "alpha": 0.3, "beta": 0.2}, {"base": "uniform"}],
                 "reward_modes": ["deterministic", "stochastic"], "n_values": [200], "replicates": 6},
    "slate": {"schema_version": 1, "seed": 13, "synthetic": {"n_queries": 80, "docs_per_query": 15, "seed": 1},
              "l": 2, "m": 5, "n_values": [200], "replicates": 3},
    "learn": {"schema_version": 1, "seed": 13, "dataset": {"id": "syn", "synthetic": {"n": 800, "k": 3, "d": 4}},
              "gammas": [0.01, 0.1], "lams": [0, 1, "inf"], "max_iter": 15},
}


def test_criterion_11_determinism(verdict, tmp_path):
    mismatched = []
    for command, cfg in CLI_CONFIGS.items():
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(cfg))
        outs = []
        for run, threads in enumerate(("1", "1", "4")):
            out = tmp_path / f"{command}-{run}"
            assert main([command, "--config", str(path), "--out", str(out), "--threads", threads]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if not (outs[0] == outs[1] == outs[2]):
            mismatched.append(command)
    verdict(11, not mismatched, f"evaluate, slate and learn rerun 3 times (threads 1, 1, 4); "
                                f"differing outputs: {mismatched or 'none'}")
