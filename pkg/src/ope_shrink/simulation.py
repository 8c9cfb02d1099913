"""Supervised-to-bandit simulation, replicate execution and evaluation metrics.

A multiclass dataset is split into a held-out part (used to train the
deterministic base policies and to measure ground truth) and a bandit pool.
Each replicate draws ``n`` logged samples from the pool, trains reward
predictors on the first half and evaluates every estimator of a roster on the
second half.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import betainc

from .core import REWARD_MODES, STOCHASTIC_HIT, FullInfoDataset, LoggedData, Policy, TabularPolicy, true_policy_value
from .errors import BadFractions, LengthMismatch, TooFewSamples
from .estimators import DRInputs, dm_estimate, dr_estimate, ips_estimate
from .policies import DeterministicPolicy, SofteningParams, soften, train_multinomial_logistic
from .reward_model import SCHEMES, WeightScheme, fit_weighted_ridge
from .rng import child_rng, child_seed
from .selection import (
    MODE_POLICIES,
    EstimatorSpec,
    GridBias,
    SelectionScore,
    argmin_objective,
    lambda_grid,
)

# ---------------------------------------------------------------- data generation


def make_synthetic_multiclass(n: int, k: int, d: int, separation: float = 1.0, seed: int = 0) -> FullInfoDataset:
    """Gaussian classes: ``x = separation * c_y + N(0, I)`` with random unit-scale centers ``c_y``."""
    rng = child_rng(seed, 0)
    centers = rng.normal(size=(k, d))
    labels = rng.integers(0, k, size=n)
    X = separation * centers[labels] + rng.normal(size=(n, d))
    return FullInfoDataset(X, labels, k)


def supervised_to_bandit(
    data: FullInfoDataset, logging: Policy, n: int, reward_mode: str = "deterministic", seed: int = 0
) -> LoggedData:
    """Draw ``n`` contexts uniformly with replacement, an action from ``logging`` and a reward.

    Deterministic rewards are ``1{a = y*}``; stochastic rewards pay 1 with
    probability 0.75 on the correct action and 0.25 elsewhere.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if reward_mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode {reward_mode!r}")
    rng = child_rng(seed, 0)
    idx = rng.integers(0, len(data), size=n)
    feats, ids, labels = data.features[idx], data.ids[idx], data.labels[idx]
    mu = logging.probs(feats, ids)
    cum = np.cumsum(mu, axis=1)
    u = rng.random(n) * cum[:, -1]
    actions = np.minimum((cum <= u[:, None]).sum(axis=1), data.k - 1)
    hit = actions == labels
    if reward_mode == "deterministic":
        rewards = hit.astype(np.float64)
    else:
        rewards = (rng.random(n) < np.where(hit, STOCHASTIC_HIT, 1.0 - STOCHASTIC_HIT)).astype(np.float64)
    return LoggedData(ids, feats, actions, rewards, mu[np.arange(n), actions], data.k, logging_probs=mu)


def split_bandit_data(samples, fractions: Sequence[float]) -> list:
    """Contiguous partitions with sizes ``floor(f * n)``; the remainder joins the last part."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.size == 0 or np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise BadFractions(f"fractions {list(fractions)} must be nonnegative and sum to 1")
    n = len(samples)
    sizes = [int(math.floor(f * n + 1e-9)) for f in fr[:-1]]
    sizes.append(n - sum(sizes))
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return [samples[int(a):int(b)] for a, b in zip(edges[:-1], edges[1:])]


# ---------------------------------------------------------------- metrics


def clipped_mse(estimates, truth: float) -> float:
    err = np.asarray(estimates, dtype=np.float64) - truth
    if err.size == 0:
        raise ValueError("estimates must be nonempty")
    return float(np.mean(np.minimum(err * err, 1.0)))


def paired_t_test(a, b) -> tuple:
    """Paired two-sided t-test on ``a - b``; returns ``(t, p)``.

    The p-value is the Student-t tail with ``R - 1`` degrees of freedom,
    evaluated via the regularized incomplete beta function.  All-zero
    differences give ``(0, 1)``; a nonzero constant difference gives an
    infinite statistic and ``p = 0``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths {a.size} and {b.size} differ")
    if a.size < 2:
        raise TooFewSamples("need at least two pairs")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    sd = float(np.std(d, ddof=1))
    mean = float(np.mean(d))
    if sd == 0:
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(d.size))
    df = d.size - 1
    return t, float(betainc(0.5 * df, 0.5, df / (df + t * t)))


def relative_mse_cdf(per_condition_mse, baseline_mse) -> list:
    """Sorted ``mse / baseline`` ratios paired with the empirical CDF ``i / N``."""
    m = np.asarray(per_condition_mse, dtype=np.float64)
    base = np.asarray(baseline_mse, dtype=np.float64)
    if m.shape != base.shape:
        raise LengthMismatch("condition sets differ")
    if np.any(base <= 0):
        raise ValueError("baseline MSEs must be positive")
    r = np.sort(m / base)
    return [(float(x), (i + 1) / len(r)) for i, x in enumerate(r)]


def cdf_at(table: Sequence[tuple], x: float) -> float:
    """Empirical CDF value at ``x`` from a :func:`relative_mse_cdf` table."""
    return max((c for r, c in table if r <= x), default=0.0)


# ---------------------------------------------------------------- policies and conditions

BASES = ("pi1", "pi2", "uniform")


@dataclass(frozen=True)
class PolicySpec:
    """Softened base policy ``base_(alpha, beta)``; ``uniform`` ignores alpha and beta."""

    base: str
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"unknown base policy {self.base!r}")

    @property
    def label(self) -> str:
        return "uniform" if self.base == "uniform" else f"{self.base}({self.alpha:g},{self.beta:g})"


TARGET_POLICY = PolicySpec("pi1", 0.9, 0.0)
LOGGING_POLICIES = (
    PolicySpec("pi1", 0.7, 0.2),
    PolicySpec("pi1", 0.5, 0.2),
    PolicySpec("uniform"),
    PolicySpec("pi2", 0.3, 0.2),
    PolicySpec("pi2", 0.5, 0.2),
    PolicySpec("pi2", 0.95, 0.1),
)


@dataclass(frozen=True, eq=False)
class Environment:
    """A dataset split into held-out and bandit parts, with the two base policies."""

    dataset_id: str
    holdout: FullInfoDataset
    pool: FullInfoDataset
    base: Mapping[str, DeterministicPolicy]
    seed: int

    @property
    def k(self) -> int:
        return self.pool.k

    def policy(self, spec: PolicySpec) -> Policy:
        if spec.base == "uniform":
            return TabularPolicy.uniform(self.k)
        b = BASES.index(spec.base)
        params = SofteningParams(spec.alpha, spec.beta, child_seed(self.seed, 1, b, round(spec.alpha * 1e6),
                                                                   round(spec.beta * 1e6)))
        return soften(self.base[spec.base], params)


def prepare_environment(
    data: FullInfoDataset, dataset_id: str = "data", seed: int = 0, holdout_frac: float = 0.25, reg: float = 1.0
) -> Environment:
    """Hold out a fraction of the rows, then fit logistic base policies on the two feature halves."""
    perm = child_rng(seed, 0).permutation(len(data))
    n_hold = int(round(holdout_frac * len(data)))
    if n_hold < 1 or n_hold >= len(data):
        raise ValueError("holdout split leaves an empty part")
    holdout, pool = data.subset(np.sort(perm[:n_hold])), data.subset(np.sort(perm[n_hold:]))
    base = {
        "pi1": DeterministicPolicy(train_multinomial_logistic(holdout, "first_half", reg=reg)),
        "pi2": DeterministicPolicy(train_multinomial_logistic(holdout, "second_half", reg=reg)),
    }
    return Environment(dataset_id, holdout, pool, base, seed)


@dataclass(frozen=True)
class ExperimentCondition:
    dataset_id: str
    logging: PolicySpec
    target: PolicySpec = TARGET_POLICY
    reward_mode: str = "deterministic"
    n: int = 2000
    replicates: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.replicates < 1:
            raise ValueError("n and replicates must be >= 1")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")

    @property
    def condition_id(self) -> str:
        return f"{self.dataset_id}|{self.logging.label}|{self.target.label}|{self.reward_mode}|n={self.n}"


# ---------------------------------------------------------------- estimator roster

ESTIMATORS = ("dm", "ips", "snips", "dr", "sndr", "switch", "drs-direct", "drs-upper",
              "drs-oracle", "dros-oracle", "drps-oracle")
DEFAULT_PREDICTORS = {
    "dm": ("const1",),
    "dr": ("w_sq",),
    "sndr": ("w",),
    "switch": ("zero_predictor", "w_sq"),
    "drs-direct": ("zero_predictor", "w_sq"),
    "drs-upper": ("zero_predictor", "w_sq"),
    "drs-oracle": ("zero_predictor", "w_sq"),
    "dros-oracle": ("zero_predictor", "w_sq"),
    "drps-oracle": ("zero_predictor", "w_sq"),
}
DEFAULT_ROSTER = ("dm", "ips", "snips", "dr", "sndr", "switch", "drs-direct", "drs-upper", "drs-oracle", "dm:w_sq")
_ORACLE_KINDS = {"drs-oracle": ("optimistic", "pessimistic"), "dros-oracle": ("optimistic",),
                 "drps-oracle": ("pessimistic",)}


@dataclass(frozen=True)
class RosterEntry:
    """An estimator name plus the reward predictors it may use (``name:scheme`` pins one)."""

    name: str
    base: str
    predictors: tuple


def parse_roster(names: Sequence[str]) -> list:
    out = []
    for name in names:
        base, _, pred = name.partition(":")
        if base not in ESTIMATORS:
            raise ValueError(f"unknown estimator {name!r}")
        if pred and (pred not in SCHEMES or base in ("ips", "snips")):
            raise ValueError(f"unknown estimator {name!r}")
        preds = (pred,) if pred else DEFAULT_PREDICTORS.get(base, ())
        out.append(RosterEntry(name, base, preds))
    if len({e.name for e in out}) != len(out):
        raise ValueError("duplicate estimator in roster")
    return out


@dataclass
class ReplicateResult:
    """One replicate: estimate per estimator, the spec each selector chose and squared errors."""

    replicate: int
    estimates: dict
    chosen: dict
    squared_errors: dict = field(default_factory=dict)


def _select_index(lams, values, ub, var) -> int:
    specs = [EstimatorSpec("", "", float(l)) for l in lams]
    scores = [SelectionScore(float(b), float(v), float(b * b + v)) for b, v in zip(ub, var)]
    return argmin_objective(specs, scores)


def evaluate_roster(
    roster: Sequence[RosterEntry],
    data: LoggedData,
    target: Policy,
    predictors: Mapping[str, tuple],
    truth: Optional[float] = None,
) -> tuple:
    """Every roster estimate on ``data``; returns ``(estimates, chosen spec ids)``.

    ``predictors`` maps a scheme name to ``(RewardPredictor, WeightScheme)``.
    Oracle entries need ``truth``.
    """
    inputs: dict = {}
    grids: dict = {}

    def inp(pid):
        if pid not in inputs:
            inputs[pid] = DRInputs(data, target, predictors[pid][0])
        return inputs[pid]

    def grid(pid, kind):
        key = (pid, kind)
        if key not in grids:
            lams = lambda_grid(inp(pid).w, kind)
            shared = next((g for (_, k2), g in grids.items() if k2 == kind and g._abs_diff is not None), None)
            grids[key] = GridBias(inp(pid), predictors[pid][1], kind, lams,
                                  None if shared is None else shared._all_actions())
        return grids[key]

    estimates, chosen = {}, {}
    for e in roster:
        if e.base == "ips":
            estimates[e.name] = ips_estimate(data, target).value
        elif e.base == "snips":
            estimates[e.name] = ips_estimate(data, target, self_normalized=True).value
        elif e.base == "dm":
            estimates[e.name] = dm_estimate(data, target, predictors[e.predictors[0]][0]).value
        elif e.base in ("dr", "sndr"):
            estimates[e.name] = dr_estimate(data, target, predictors[e.predictors[0]][0],
                                            self_normalized=e.base == "sndr").value
        else:
            if e.base == "switch":
                kinds, (modes, inflate) = ("switch",), MODE_POLICIES["switch"]
            elif e.base in _ORACLE_KINDS:
                kinds, modes, inflate = _ORACLE_KINDS[e.base], None, None
            else:
                kinds = ("optimistic", "pessimistic")
                modes, inflate = MODE_POLICIES["DRs-direct" if e.base == "drs-direct" else "DRs-upper"]
            cands = []
            for pid in e.predictors:
                for kind in kinds:
                    g = grid(pid, kind)
                    if modes is None:
                        if truth is None:
                            raise ValueError(f"{e.name} needs the true value")
                        obj = (g.values - truth) ** 2
                        j = int(np.argmin(obj))
                        key = (float(obj[j]), 0.0, float(g.lams[j]))
                    else:
                        ub = g.bias_ub(modes, inflate)
                        j = _select_index(g.lams, g.values, ub, g.var_hat)
                        key = (float(ub[j] ** 2 + g.var_hat[j]), float(ub[j]), float(g.lams[j]))
                    cands.append((key, len(cands), pid, kind, j, float(g.values[j])))
            key, _, pid, kind, j, value = min(cands)
            estimates[e.name] = value
            chosen[e.name] = EstimatorSpec(pid, kind, float(grid(pid, kind).lams[j])).spec_id
    return estimates, chosen


# ---------------------------------------------------------------- replicate execution


@dataclass(frozen=True, eq=False)
class ConditionResult:
    condition: ExperimentCondition
    truth: float
    names: tuple
    estimates: np.ndarray  # (R, E)
    chosen: list

    def squared_errors(self) -> np.ndarray:
        return (self.estimates - self.truth) ** 2

    def clipped_squared_errors(self) -> np.ndarray:
        return np.minimum(self.squared_errors(), 1.0)

    def column(self, name: str) -> np.ndarray:
        return self.estimates[:, self.names.index(name)]

    def clipped_mse(self, name: str) -> float:
        return clipped_mse(self.column(name), self.truth)


def fit_predictors(train: LoggedData, target: Policy, schemes: Sequence[str], seed: int, reg: float = 1.0) -> dict:
    out = {}
    for s in schemes:
        scheme = WeightScheme(s, target if s in ("w", "w_sq", "mrdr") else None, seed)
        out[s] = (fit_weighted_ridge(train, scheme, reg), scheme)
    return out


def run_replicate(env: Environment, cond: ExperimentCondition, roster: Sequence[RosterEntry], rep: int,
                  truth: float, reg: float = 1.0) -> ReplicateResult:
    seed = child_seed(cond.seed, rep)
    logging, target = env.policy(cond.logging), env.policy(cond.target)
    data = supervised_to_bandit(env.pool, logging, cond.n, cond.reward_mode, seed)
    train, ev = split_bandit_data(data, (0.5, 0.5))
    if len(train) < 1 or len(ev) < 2:
        raise TooFewSamples("each replicate needs at least 4 samples")
    schemes = sorted({p for e in roster for p in e.predictors})
    predictors = fit_predictors(train, target, schemes, child_seed(seed, 1), reg)
    est, chosen = evaluate_roster(roster, ev, target, predictors, truth)
    return ReplicateResult(rep, est, chosen, {k: (v - truth) ** 2 for k, v in est.items()})


def condition_truth(env: Environment, cond: ExperimentCondition, truth_on: str = "holdout") -> float:
    part = {"holdout": env.holdout, "pool": env.pool}[truth_on]
    return true_policy_value(env.policy(cond.target), part, cond.reward_mode)


def run_condition(env: Environment, cond: ExperimentCondition, roster_names: Sequence[str] = DEFAULT_ROSTER,
                  threads: int = 1, truth_on: str = "holdout", reg: float = 1.0) -> ConditionResult:
    """All replicates of one condition, reduced in replicate order.

    Replicate ``r`` draws from ``child_seed(cond.seed, r)`` only, so the
    result is identical for any number of worker threads.
    """
    roster = parse_roster(roster_names)
    truth = condition_truth(env, cond, truth_on)

    def one(rep):
        return run_replicate(env, cond, roster, rep, truth, reg)

    reps = range(cond.replicates)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, reps))
    else:
        results = [one(r) for r in reps]
    names = tuple(e.name for e in roster)
    est = np.array([[r.estimates[nm] for nm in names] for r in results])
    return ConditionResult(cond, truth, names, est, [r.chosen for r in results])


def learning_curve(env: Environment, cond: ExperimentCondition, ns: Sequence[int], **kw) -> list:
    """:func:`run_condition` at several sample sizes (same seed)."""
    from dataclasses import replace

    return [run_condition(env, replace(cond, n=int(n)), **kw) for n in ns]


# ---------------------------------------------------------------- reports

RESULTS_HEADER = ["condition_id", "estimator", "mse", "clipped_mse", "bias_est", "var_est"]
TTEST_HEADER = ["condition_id", "estimator_a", "estimator_b", "t_stat", "p_value", "winner"]
CDF_HEADER = ["reward_mode", "estimator", "relative_mse", "cdf"]


def write_results_csv(results: Sequence[ConditionResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for res in results:
            err = res.estimates - res.truth
            R = err.shape[0]
            for j, name in enumerate(res.names):
                var = float(np.var(res.estimates[:, j], ddof=1)) if R > 1 else 0.0
                w.writerow([res.condition.condition_id, name, repr(float(np.mean(err[:, j] ** 2))),
                            repr(clipped_mse(res.estimates[:, j], res.truth)), repr(float(np.mean(err[:, j]))),
                            repr(var)])


def write_ttest_csv(results: Sequence[ConditionResult], path, alpha: float = 0.05) -> None:
    """Pairwise paired t-tests on clipped squared errors; ``winner`` is blank unless ``p < alpha``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TTEST_HEADER)
        for res in results:
            ce = res.clipped_squared_errors()
            for a in range(len(res.names)):
                for b in range(a + 1, len(res.names)):
                    if ce.shape[0] < 2:
                        t, p = 0.0, 1.0
                    else:
                        t, p = paired_t_test(ce[:, a], ce[:, b])
                    winner = "" if p >= alpha else (res.names[a] if t < 0 else res.names[b])
                    w.writerow([res.condition.condition_id, res.names[a], res.names[b], repr(float(t)),
                                repr(float(p)), winner])


def write_cdf_csv(results: Sequence[ConditionResult], path, baseline: str = "snips") -> None:
    """Relative clipped-MSE CDF of every estimator against ``baseline``, per reward mode."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CDF_HEADER)
        for mode in REWARD_MODES:
            group = [r for r in results if r.condition.reward_mode == mode and baseline in r.names]
            if not group:
                continue
            base = np.array([r.clipped_mse(baseline) for r in group])
            if np.any(base <= 0):
                continue
            for name in group[0].names:
                if not all(name in r.names for r in group):
                    continue
                table = relative_mse_cdf([r.clipped_mse(name) for r in group], base)
                for ratio, c in table:
                    w.writerow([mode, name, repr(ratio), repr(c)])


def selection_report(env: Environment, cond: ExperimentCondition, mode_policy: str = "DRs-direct",
                     predictor_ids: Sequence[str] = ("zero_predictor", "w_sq"), rep: int = 0,
                     reg: float = 1.0) -> tuple:
    """Scores of every DRs candidate on replicate ``rep``; returns ``(specs, scores, chosen index)``."""
    from .selection import build_specs, select

    seed = child_seed(cond.seed, rep)
    target = env.policy(cond.target)
    data = supervised_to_bandit(env.pool, env.policy(cond.logging), cond.n, cond.reward_mode, seed)
    train, ev = split_bandit_data(data, (0.5, 0.5))
    predictors = fit_predictors(train, target, predictor_ids, child_seed(seed, 1), reg)
    w = DRInputs(ev, target, predictors[predictor_ids[0]][0]).w
    kinds = ("switch",) if mode_policy == "switch" else ("optimistic", "pessimistic")
    specs = build_specs(predictor_ids, kinds, {k: lambda_grid(w, k) for k in kinds})
    spec, scores, _ = select(specs, ev, target, predictors, mode_policy)
    return specs, scores, specs.index(spec)
