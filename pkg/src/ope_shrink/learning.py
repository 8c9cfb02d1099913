"""Off-policy learning of softmax-linear policies by minimizing ``-V_hat(pi_u) + gamma ||u||^2``.

``V_hat`` is the shrinkage DR estimate with importance weights recomputed
from ``u``.  The gradient is analytic:

    d pi_u(a|x) / du = pi_u(a|x) (f(x, a) - f_bar(x)),   f_bar = sum_a pi_u(a|x) f(x, a)
    d w_i / du       = w_i (f(x_i, a_i) - f_bar(x_i))

and the weight map contributes ``w_hat'(w_i)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import softmax

from .core import LoggedData, true_policy_value, FullInfoDataset
from .errors import NonFiniteObjective
from .estimators import INF, WeightMap
from .policies import LinearScorer, SofteningParams, SoftmaxLinearPolicy, soften, train_multinomial_logistic, DeterministicPolicy
from .reward_model import JointFeaturizer, RewardPredictor, WeightScheme, fit_weighted_ridge
from .selection import build_specs, lambda_grid, select
from .simulation import split_bandit_data, supervised_to_bandit
from .rng import child_rng, child_seed

TRAINING_LAMBDAS = (0.0, 0.1, 1.0, 10.0, 100.0, 1000.0, INF)
LEARNING_KINDS = ("optimistic", "pessimistic")


@dataclass(frozen=True)
class LearningConfig:
    """One training run: estimator ``(predictor, kind, lam)``, regularizer and optimizer budget."""

    predictor: str = "zero_predictor"
    kind: str = "optimistic"
    lam: float = INF
    gamma: float = 0.01
    step: float = 0.1
    max_iter: int = 2000
    tol: float = 1e-6
    seed: int = 0
    self_normalized: bool = False

    def __post_init__(self):
        if self.lam not in TRAINING_LAMBDAS:
            raise ValueError(f"lam must be one of {TRAINING_LAMBDAS}")
        if self.kind not in LEARNING_KINDS:
            raise ValueError(f"kind must be one of {LEARNING_KINDS}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.step > 0 or self.max_iter < 0:
            raise ValueError("step must be positive and max_iter nonnegative")

    @property
    def wmap(self) -> WeightMap:
        return WeightMap(self.kind, self.lam)


class LearningProblem:
    """Fixed pieces of the objective: joint features, logged data and imputed rewards."""

    def __init__(self, data: LoggedData, predictor: RewardPredictor, featurizer: Optional[Callable] = None):
        self.featurizer = featurizer if featurizer is not None else JointFeaturizer(data.k)
        self.F = self.featurizer(data.features)  # (n, k, p)
        self.actions = data.actions
        self.rewards = data.rewards
        self.propensities = data.propensities
        self.eta = predictor.predict_all(data.features)  # (n, k)
        self.rows = np.arange(len(data))
        self.residuals = self.rewards - self.eta[self.rows, self.actions]
        self.k = data.k

    @property
    def dim(self) -> int:
        return self.F.shape[2]

    def policy(self, u: np.ndarray) -> SoftmaxLinearPolicy:
        return SoftmaxLinearPolicy(u, self.featurizer, self.k)


def _value_and_grad(u, prob: LearningProblem, wmap: WeightMap, self_normalized: bool, need_grad: bool = True):
    pi = softmax(prob.F @ u, axis=1)
    w = pi[prob.rows, prob.actions] / prob.propensities
    w_hat = wmap(w)
    dm = np.sum(pi * prob.eta, axis=1)
    n = len(w)
    if self_normalized:
        S = float(np.sum(w_hat))
        corr = float(np.sum(w_hat * prob.residuals)) / S if S > 0 else 0.0
        value = float(np.mean(dm)) + corr
    else:
        value = float(np.mean(dm + w_hat * prob.residuals))
    if not need_grad:
        return value, None
    fbar = np.einsum("nk,nkp->np", pi, prob.F)
    centered = prob.F - fbar[:, None, :]
    g_dm = np.einsum("nk,nkp->p", pi * prob.eta, centered) / n
    dw = (w * wmap.derivative(w))[:, None] * centered[prob.rows, prob.actions]  # d w_hat_i / du
    if self_normalized:
        S = float(np.sum(w_hat))
        if S > 0:
            num = float(np.sum(w_hat * prob.residuals))
            g_corr = (prob.residuals @ dw) / S - num * dw.sum(axis=0) / S**2
        else:
            g_corr = np.zeros_like(u)
    else:
        g_corr = (prob.residuals @ dw) / n
    return value, g_dm + g_corr


def learning_objective(u, prob: LearningProblem, config: LearningConfig) -> float:
    """``-V_hat_DRs(pi_u) + gamma ||u||^2``."""
    u = np.asarray(u, dtype=np.float64)
    v, _ = _value_and_grad(u, prob, config.wmap, config.self_normalized, need_grad=False)
    return -v + config.gamma * float(u @ u)


def learning_gradient(u, prob: LearningProblem, config: LearningConfig) -> np.ndarray:
    """Analytic gradient of :func:`learning_objective`.

    The pessimistic map is differentiated with slope 0 on its clipped branch.
    """
    u = np.asarray(u, dtype=np.float64)
    _, g = _value_and_grad(u, prob, config.wmap, config.self_normalized)
    return -g + 2.0 * config.gamma * u


@dataclass
class TrainResult:
    u: np.ndarray
    trace: list
    converged: bool
    config: LearningConfig

    def scorer(self, feature_dim: int) -> LinearScorer:
        """The learned ``u`` as a per-class linear scorer (valid for the joint feature layout)."""
        return LinearScorer(self.u.reshape(self.config_k(feature_dim), feature_dim + 1), "all", feature_dim)

    def config_k(self, feature_dim: int) -> int:
        return len(self.u) // (feature_dim + 1)

    def to_json(self, feature_dim: int) -> str:
        cfg = asdict(self.config)
        cfg["lam"] = "inf" if math.isinf(cfg["lam"]) else cfg["lam"]
        return json.dumps({"scorer": json.loads(self.scorer(feature_dim).to_json()), "policy": "softmax-linear",
                           "config": cfg, "converged": self.converged, "iterations": len(self.trace) - 1},
                          sort_keys=True)


def train_policy(config: LearningConfig, prob: LearningProblem, u0: Optional[np.ndarray] = None) -> TrainResult:
    """Gradient descent from ``u0`` (default 0) with Armijo backtracking.

    Each iteration starts from ``config.step`` and halves until the
    sufficient-decrease test passes, so the objective trace never increases.
    Stops when the gradient norm drops to ``config.tol`` or no decreasing step
    exists.
    """
    u = np.zeros(prob.dim) if u0 is None else np.array(u0, dtype=np.float64)

    def f(x):
        val = learning_objective(x, prob, config)
        if not math.isfinite(val):
            raise NonFiniteObjective("objective is not finite; reduce the step size")
        return val

    fu = f(u)
    trace = [fu]
    converged = False
    for _ in range(config.max_iter):
        g = learning_gradient(u, prob, config)
        gg = float(g @ g)
        if math.sqrt(gg) <= config.tol:
            converged = True
            break
        t = config.step
        while True:
            cand = u - t * g
            fc = learning_objective(cand, prob, config)
            if math.isfinite(fc) and fc <= fu - 0.5 * t * gg:
                break
            t *= 0.5
            if t < 1e-14:
                cand = None
                break
        if cand is None:
            break
        u, fu = cand, fc
        trace.append(fu)
    else:
        converged = math.sqrt(float(np.sum(learning_gradient(u, prob, config) ** 2))) <= config.tol
    return TrainResult(u, trace, converged, config)


def validated_value(policy, data: LoggedData, predictors: Mapping[str, tuple], mode_policy: str = "DRs-direct") -> float:
    """Value of ``policy`` on validation data, estimated by DRs with model selection."""
    w = policy.probs_for(data)[np.arange(len(data)), data.actions] / data.propensities
    grids = {k: lambda_grid(w, k) for k in LEARNING_KINDS}
    specs = build_specs(list(predictors), LEARNING_KINDS, grids)
    spec, _, scored = select(specs, data, policy, predictors, mode_policy)
    return float(scored.values[scored.specs.index(spec)])


def select_learned_policy(candidates: Sequence, data: LoggedData, predictors: Mapping[str, tuple],
                          mode_policy: str = "DRs-direct") -> int:
    """Index of the candidate policy with the highest validated value; ties go to the first."""
    if not candidates:
        raise ValueError("candidates must be nonempty")
    vals = [validated_value(c, data, predictors, mode_policy) for c in candidates]
    return int(np.argmax(vals))


# ---------------------------------------------------------------- experiment

LEARNING_SCHEMES = ("zero_predictor", "inv_mu", "inv_mu_sq")
LEARNING_METHODS = ("dm", "dr", "ips", "drs-direct")
LEARNING_REPORT_HEADER = ["method", "predictor", "kind", "lam", "gamma", "test_value", "normalized_value"]


@dataclass(frozen=True)
class LearningExperiment:
    gammas: tuple = (0.001, 0.01, 0.1)
    lams: tuple = TRAINING_LAMBDAS
    reward_mode: str = "deterministic"
    logging_alpha: float = 0.9
    step: float = 0.1
    max_iter: int = 200
    seed: int = 0
    reg: float = 1.0


@dataclass
class LearningOutcome:
    rows: list  # (method, predictor, kind, lam, gamma, test value)
    chosen: TrainResult
    feature_dim: int
    values: dict = field(default_factory=dict)


def run_learning(data: FullInfoDataset, exp: LearningExperiment) -> LearningOutcome:
    """Four-way split: full-information quarter (logging policy and test set), then three bandit quarters
    for reward predictors, policy training and model selection."""
    perm = child_rng(exp.seed, 0).permutation(len(data))
    quarters = split_bandit_data(perm, (0.25, 0.25, 0.25, 0.25))
    full = data.subset(np.sort(quarters[0]))
    logging = soften(DeterministicPolicy(train_multinomial_logistic(full, "first_half", reg=exp.reg)),
                     SofteningParams(exp.logging_alpha, 0.0, child_seed(exp.seed, 1)))
    bandit = []
    for j, q in enumerate(quarters[1:]):
        part = data.subset(np.sort(q))
        bandit.append(supervised_to_bandit(part, logging, len(part), exp.reward_mode, child_seed(exp.seed, 2, j)))
    fit_part, train_part, valid_part = bandit
    predictors = {}
    for s in LEARNING_SCHEMES:
        scheme = WeightScheme(s)
        predictors[s] = (fit_weighted_ridge(fit_part, scheme, exp.reg), scheme)
    problems = {s: LearningProblem(train_part, predictors[s][0]) for s in LEARNING_SCHEMES}

    def test_value(res: TrainResult) -> float:
        return true_policy_value(problems[res.config.predictor].policy(res.u), full, exp.reward_mode)

    runs = []
    method_of = {}
    for s in LEARNING_SCHEMES:
        for kind in LEARNING_KINDS:
            for lam in exp.lams:
                for gamma in exp.gammas:
                    cfg = LearningConfig(s, kind, lam, gamma, exp.step, exp.max_iter, seed=exp.seed)
                    runs.append(train_policy(cfg, problems[s]))
    for i, r in enumerate(runs):
        c = r.config
        if c.kind == "optimistic" and c.lam == 0 and c.predictor != "zero_predictor":
            method_of.setdefault("dm", []).append(i)
        if c.kind == "optimistic" and math.isinf(c.lam) and c.predictor != "zero_predictor":
            method_of.setdefault("dr", []).append(i)
        if c.kind == "optimistic" and math.isinf(c.lam) and c.predictor == "zero_predictor":
            method_of.setdefault("ips", []).append(i)
    tv = [test_value(r) for r in runs]
    rows, values = [], {}
    # DM, DR and IPS are tuned in hindsight on the test set, DRs by validated model selection
    for m in ("dm", "dr", "ips"):
        idx = method_of.get(m, [])
        if idx:
            best = max(idx, key=lambda i: (tv[i], -i))
            values[m] = (best, tv[best])
    drs_idx = list(range(len(runs)))
    pols = [problems[runs[i].config.predictor].policy(runs[i].u) for i in drs_idx]
    best = drs_idx[select_learned_policy(pols, valid_part, predictors)]
    values["drs-direct"] = (best, tv[best])
    base = values["ips"][1] if "ips" in values and values["ips"][1] > 0 else 1.0
    for m in LEARNING_METHODS:
        if m in values:
            i, v = values[m]
            c = runs[i].config
            rows.append([m, c.predictor, c.kind, c.lam, c.gamma, v, v / base])
    return LearningOutcome(rows, runs[values["drs-direct"][0]], data.feature_dim, {m: v for m, (_, v) in values.items()})
