"""Slate evaluation protocol: ranking policies from relevance data, epsilon-greedy logs, MSE vs n.

Per query the logging scorer picks the top ``m`` candidate documents; slates
are written in rank space, so item ``i`` is the candidate ranked ``i`` by the
logging scorer and the greedy slate is ``(0, ..., l-1)``.  The target lists
the top ``l`` candidates by a second scorer.  Rewards are linear in the
``l``-hot slate vector, which makes every query's true value exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError
from .policies import mask_columns
from .reward_model import solve_weighted_ridge
from .rng import child_rng, child_seed
from .selection import sample_variance_of_mean, slate_lambda_grid
from .slate import (
    EPSILON_SET,
    EpsilonGreedySlateLogger,
    LoggedSlateData,
    Query,
    SlateBasis,
    SlateInputs,
    build_basis,
    lhot_encode,
    ndcg_vector,
    solve_v,
)

SLATE_PREDICTORS = ("ridge_all", "ridge_5")
SLATE_ESTIMATORS = ("dm", "dr-pi", "drs-pi", "drs-pi-oracle")


def make_synthetic_queries(n_queries: int, docs_per_query: int, n_features: int = 10, seed: int = 0) -> list:
    """Queries whose graded relevance in {0,...,4} is a noisy linear function of the features."""
    rng = child_rng(seed, 0)
    beta = rng.normal(size=n_features)
    beta /= np.linalg.norm(beta)
    out = []
    for qid in range(n_queries):
        X = rng.normal(size=(docs_per_query, n_features))
        latent = 1.0 + 1.2 * X @ beta + 0.6 * rng.normal() + 0.8 * rng.normal(size=docs_per_query)
        rel = np.clip(np.round(latent), 0, 4)
        out.append(Query(qid, np.arange(docs_per_query), rel, X))
    return out


def fit_relevance_scorer(queries: Sequence[Query], mask: str, reg: float = 1.0) -> np.ndarray:
    """Ridge regression of relevance on the masked features; returns ``(coef, intercept)`` stacked."""
    X = np.vstack([q.features for q in queries])
    y = np.concatenate([q.relevance for q in queries])
    cols = mask_columns(mask, X.shape[1])
    Phi = np.hstack([X[:, cols], np.ones((len(X), 1))])
    return solve_weighted_ridge(Phi, y, np.ones(len(y)), reg)


def _score(theta, features, mask):
    cols = mask_columns(mask, features.shape[1])
    return features[:, cols] @ theta[:-1] + theta[-1]


@dataclass(frozen=True, eq=False)
class SlateWorld:
    """Everything per bandit query that does not depend on the logged sample.

    Attributes
    ----------
    eta : (Q, l*m) true expected-NDCG vectors (deterministic reward)
    cand_features : (Q, m, p) features of the candidates in rank order
    q : (Q, l*m) target mean action vectors
    v : (Q, s) basis coefficients of ``q``
    target_items : (Q, l) target slate in rank space
    """

    basis: SlateBasis
    query_ids: np.ndarray
    eta: np.ndarray
    cand_features: np.ndarray
    q: np.ndarray
    v: np.ndarray
    target_items: np.ndarray
    epsilon_set: tuple = EPSILON_SET

    @property
    def n_queries(self) -> int:
        return len(self.query_ids)

    def expected_reward(self, reward_mode: str) -> np.ndarray:
        """Per-query linear reward vector; the stochastic reward is ``0.25 + 0.5 NDCG``."""
        if reward_mode == "deterministic":
            return self.eta
        if reward_mode == "stochastic":
            # each slate has exactly l ones, so the constant spreads as 0.25/l per entry
            return 0.25 / self.basis.l + 0.5 * self.eta
        raise ValueError(f"unknown reward mode {reward_mode!r}")

    def truth(self, reward_mode: str) -> float:
        return float(np.mean(np.sum(self.expected_reward(reward_mode) * self.q, axis=1)))

    def logging_probs(self, eps: np.ndarray) -> np.ndarray:
        return EpsilonGreedySlateLogger(self.basis.size, self.epsilon_set).probs_for_epsilon(eps)


def prepare_slate_world(queries: Sequence[Query], l: int, m: int, seed: int = 0, train_frac: float = 0.1,
                        reg: float = 1.0, epsilon_set: Sequence[float] = EPSILON_SET) -> SlateWorld:
    """Train the two scorers on a fraction of queries and precompute every bandit query."""
    basis = build_basis(l, m)
    usable = [q for q in queries if len(q.relevance) >= m]
    if len(usable) < 2:
        raise DataFormatError(f"need at least two queries with >= {m} documents")
    perm = child_rng(seed, 0).permutation(len(usable))
    n_train = max(1, int(round(train_frac * len(usable))))
    train = [usable[i] for i in sorted(perm[:n_train])]
    bandit = [usable[i] for i in sorted(perm[n_train:])]
    if not bandit:
        raise DataFormatError("no queries left for the bandit protocol")
    logging_theta = fit_relevance_scorer(train, "second_half", reg)
    target_theta = fit_relevance_scorer(train, "first_half", reg)
    eta, feats, qs, vs, targets = [], [], [], [], []
    for qr in bandit:
        order = np.argsort(-_score(logging_theta, qr.features, "second_half"), kind="stable")[:m]
        rel = qr.relevance[order]
        cf = qr.features[order]
        tgt = np.argsort(-_score(target_theta, cf, "first_half"), kind="stable")[:l]
        qv = lhot_encode(tgt, l, m)
        v, _ = solve_v(basis, qv)
        eta.append(ndcg_vector(rel, l))
        feats.append(cf)
        qs.append(qv)
        vs.append(v)
        targets.append(tgt)
    return SlateWorld(basis, np.array([q.query_id for q in bandit]), np.array(eta), np.array(feats), np.array(qs),
                      np.array(vs), np.array(targets), tuple(epsilon_set))


def log_slates(world: SlateWorld, n: int, reward_mode: str, seed: int) -> LoggedSlateData:
    """``n`` epsilon-greedy slate interactions; ``context_ids`` index the world's queries."""
    rng = child_rng(seed, 0)
    qidx = rng.integers(0, world.n_queries, size=n)
    logger = EpsilonGreedySlateLogger(world.basis.size, world.epsilon_set, child_seed(seed, 1))
    eps = logger.epsilon(np.arange(n))
    mu = logger.probs_for_epsilon(eps)
    cum = np.cumsum(mu, axis=1)
    b = np.minimum((cum <= (rng.random(n) * cum[:, -1])[:, None]).sum(axis=1), world.basis.size - 1)
    mean_r = np.einsum("ij,ji->i", world.expected_reward(reward_mode)[qidx], world.basis.B[:, b])
    if reward_mode == "deterministic":
        r = mean_r
    else:
        r = (rng.random(n) < mean_r).astype(np.float64)
    return LoggedSlateData(qidx, eps, b, np.clip(r, 0.0, 1.0), mu[np.arange(n), b])


class SlateRidgePredictor:
    """Position-wise linear model ``eta_hat(x)[j*m + i] = theta_j . (f(x, i)[cols], 1)``."""

    def __init__(self, theta: np.ndarray, cols: np.ndarray, l: int):
        self.theta = theta.reshape(l, -1)
        self.cols = cols
        self.l = l

    def eta_hat(self, cand_features: np.ndarray) -> np.ndarray:
        """``(Q, m, p)`` candidate features to ``(Q, l*m)`` predicted reward vectors."""
        F = cand_features[:, :, self.cols]
        scores = np.einsum("qip,jp->qji", F, self.theta[:, :-1]) + self.theta[:, -1][None, :, None]
        return scores.reshape(len(cand_features), -1)


def _slot_design(world: SlateWorld, data: LoggedSlateData, cols: np.ndarray) -> np.ndarray:
    items = np.array(world.basis.actions)[data.basis_index]  # (n, l)
    F = world.cand_features[data.context_ids[:, None], items][:, :, cols]  # (n, l, p')
    ones = np.ones(F.shape[:2] + (1,))
    return np.concatenate([F, ones], axis=2).reshape(len(data), -1)


def fit_slate_predictor(world: SlateWorld, data: LoggedSlateData, kind: str = "ridge_all",
                        reg: float = 1.0) -> SlateRidgePredictor:
    """Ridge on all candidate features, or on the five whose slate sums correlate most with reward."""
    p = world.cand_features.shape[2]
    cols = np.arange(p)
    if kind == "ridge_5":
        items = np.array(world.basis.actions)[data.basis_index]
        summed = world.cand_features[data.context_ids[:, None], items].sum(axis=1)  # (n, p)
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.nan_to_num(np.abs([np.corrcoef(summed[:, c], data.rewards)[0, 1] for c in range(p)]))
        cols = np.sort(np.argsort(-corr, kind="stable")[: min(5, p)])
    elif kind != "ridge_all":
        raise ValueError(f"unknown slate predictor {kind!r}")
    Phi = _slot_design(world, data, cols)
    theta = solve_weighted_ridge(Phi, data.rewards, np.ones(len(data)), reg)
    return SlateRidgePredictor(theta, cols, world.basis.l)


def slate_inputs(world: SlateWorld, data: LoggedSlateData, eta_hat: np.ndarray) -> SlateInputs:
    """Vectorized :meth:`SlateInputs.from_states` for a prepared world (``eta_hat`` is per query)."""
    ids, b = data.context_ids, data.basis_index
    mu = world.logging_probs(data.epsilons)[np.arange(len(data)), b]
    w = world.v[ids, b] / mu
    eta = eta_hat[ids]
    eta_a = np.einsum("ij,ji->i", eta, world.basis.B[:, b])
    return SlateInputs(np.sum(eta * world.q[ids], axis=1), w, data.rewards - eta_a)


def evaluate_slate(inp: SlateInputs, truth: float) -> dict:
    """DM, DR-PI, model-selected DRs-PI (direct bias) and oracle-tuned DRs-PI."""
    lams = slate_lambda_grid(inp.w)
    terms = inp.terms(lams)
    values = terms.mean(axis=1)
    n = terms.shape[1]
    c = terms - values[:, None]
    var = np.einsum("gi,gi->g", c, c) / (n - 1) / n
    bias = inp.direct_bias(lams)
    obj = bias**2 + var
    sel = min(range(len(lams)), key=lambda i: (obj[i], bias[i], lams[i]))
    orc = int(np.argmin((values - truth) ** 2))
    return {
        "dm": float(np.mean(inp.dm_terms)),
        "dr-pi": float(inp.terms([math.inf])[0].mean()),
        "drs-pi": float(values[sel]),
        "drs-pi-oracle": float(values[orc]),
        "_lam_selected": float(lams[sel]),
    }


@dataclass(frozen=True)
class SlateCondition:
    reward_mode: str = "deterministic"
    predictor: str = "ridge_all"
    ns: tuple = (500, 2000)
    replicates: int = 20
    seed: int = 0
    reg: float = 1.0


@dataclass(frozen=True, eq=False)
class SlateResult:
    condition: SlateCondition
    truth: float
    estimates: dict  # (n, estimator) -> (R,) array

    def mse(self, n: int, estimator: str) -> float:
        return float(np.mean((self.estimates[(n, estimator)] - self.truth) ** 2))

    def se(self, n: int, estimator: str) -> float:
        return math.sqrt(sample_variance_of_mean((self.estimates[(n, estimator)] - self.truth) ** 2))


def run_slate_condition(world: SlateWorld, cond: SlateCondition) -> SlateResult:
    truth = world.truth(cond.reward_mode)
    est = {(n, e): np.empty(cond.replicates) for n in cond.ns for e in SLATE_ESTIMATORS}
    for r in range(cond.replicates):
        for n in cond.ns:
            seed = child_seed(cond.seed, r, n)
            data = log_slates(world, n, cond.reward_mode, seed)
            half = len(data) // 2
            pred = fit_slate_predictor(world, data[:half], cond.predictor, cond.reg)
            out = evaluate_slate(slate_inputs(world, data[half:], pred.eta_hat(world.cand_features)), truth)
            for e in SLATE_ESTIMATORS:
                est[(n, e)][r] = out[e]
    return SlateResult(cond, truth, est)


SLATE_RESULTS_HEADER = ["reward_mode", "predictor", "n", "estimator", "mse", "mse_se"]


def write_slate_results_csv(results: Sequence[SlateResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SLATE_RESULTS_HEADER)
        for res in results:
            c = res.condition
            for n in c.ns:
                for e in SLATE_ESTIMATORS:
                    se = res.se(n, e) if c.replicates > 1 else 0.0
                    w.writerow([c.reward_mode, c.predictor, n, e, repr(res.mse(n, e)), repr(se)])
