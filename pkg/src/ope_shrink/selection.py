"""Hyperparameter selection by minimizing an estimated MSE.

For each candidate ``theta = (predictor, shrinkage kind, lam)`` we compute the
sample variance of the estimate and a data-dependent bias bound, and pick
``argmin BiasUB(theta)^2 + Var_hat(theta)``.  Three bias estimates are
available:

``direct``
    ``|mean((w_hat - w)(r - eta_hat))|``, the plug-in bias.
``optimistic``
    ``sqrt(T1 * T2)`` with ``T1 = mean z (r - eta_hat)^2`` and
    ``T2 = mean_i sum_a mu(a|x_i) (w_hat - w)^2 / z``.
``pessimistic``
    ``mean_i sum_a pi(a|x_i) |w_hat/w - 1|``.

All three vanish when ``w_hat = w``.  Each can be inflated by twice its
standard error (``two_se``) or by Bernstein/Hoeffding terms at a fixed
``delta`` (``bernstein``).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import LoggedData, Policy
from .errors import DegenerateWeights, TooFewSamples, ZeroWeightScheme
from .estimators import INF, DRInputs, WeightMap, apply_map, grid_terms
from .reward_model import RewardPredictor, WeightScheme

BIAS_MODES = ("direct", "optimistic", "pessimistic")
INFLATIONS = ("none", "two_se", "bernstein")
BERNSTEIN_DELTA = 0.05

MODE_POLICIES = {
    "DRs-direct": (BIAS_MODES, "none"),
    "DRs-upper": (BIAS_MODES, "two_se"),
    "switch": (("pessimistic",), "none"),
    "direct-only": (("direct",), "none"),
}


def _quantiles(weights, probs):
    return np.quantile(np.asarray(weights, dtype=np.float64), probs, method="linear")


def lambda_grid(weights: Sequence[float], kind: str, n_points: int = 30) -> np.ndarray:
    """Geometric grid of shrinkage coefficients plus the sentinels 0 and inf.

    Pessimistic (and SWITCH) grids run from the 0.05 to the 0.95 quantile of
    the importance weights; optimistic grids from ``0.01 * q05^2`` to
    ``100 * q95^2``.  Quantiles interpolate linearly.  A zero lower endpoint
    is replaced by the smallest positive weight.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("weights must be nonempty")
    q05, q95 = _quantiles(w, [0.05, 0.95])
    if q05 <= 0:
        pos = w[w > 0]
        if pos.size == 0:
            return np.array([0.0, INF])
        q05 = min(float(pos.min()), q95)
    if kind in ("pessimistic", "switch"):
        lo, hi = q05, q95
    elif kind == "optimistic":
        lo, hi = 0.01 * q05**2, 100.0 * q95**2
    else:
        raise ValueError(f"no grid for shrinkage kind {kind!r}")
    if lo == hi:
        warnings.warn(DegenerateWeights(f"all importance weights equal {q05}; grid collapses"), stacklevel=2)
        return np.array([lo, 0.0, INF])
    return np.concatenate([np.geomspace(lo, hi, n_points), [0.0, INF]])


def slate_lambda_grid(weights: Sequence[float], n_points: int = 15) -> np.ndarray:
    """Slate grid: ``n_points`` geometric values in ``[0.01 q05^2, 100 q95^2]`` plus 1e-50 and 1e30.

    Slate weights can be negative; quantiles are taken of ``|w|`` since the
    shrinkage factor depends on ``w^2`` only.
    """
    a = np.abs(np.asarray(weights, dtype=np.float64))
    q05, q95 = _quantiles(a, [0.05, 0.95])
    if q05 <= 0:
        pos = a[a > 0]
        q05 = float(pos.min()) if pos.size else 1.0
        q95 = max(q95, q05)
    lo, hi = 0.01 * q05**2, 100.0 * q95**2
    return np.concatenate([np.geomspace(lo, hi, n_points), [1e-50, 1e30]])


def sample_variance_of_mean(values: Sequence[float]) -> float:
    """``Var_hat / n`` with ``Var_hat = 1/(2n(n-1)) sum_{i != j} (Z_i - Z_j)^2``.

    The pairwise U-statistic equals the unbiased sample variance; it is
    evaluated in O(n) from the centered sum of squares.
    """
    z = np.asarray(values, dtype=np.float64)
    n = z.size
    if n < 2:
        raise TooFewSamples("need at least two values")
    c = z - z.mean()
    return float(np.dot(c, c) / (n - 1) / n)


def _rows_var_of_mean(terms: np.ndarray) -> np.ndarray:
    n = terms.shape[-1]
    c = terms - terms.mean(axis=-1, keepdims=True)
    return np.einsum("...i,...i->...", c, c) / (n - 1) / n


def _se(terms: np.ndarray) -> np.ndarray:
    return np.sqrt(_rows_var_of_mean(terms))


@dataclass(frozen=True)
class EstimatorSpec:
    predictor: str
    kind: str
    lam: float

    @property
    def spec_id(self) -> str:
        return f"{self.predictor}/{self.kind}/{self.lam!r}"


@dataclass(frozen=True)
class SelectionScore:
    bias_ub: float
    variance_hat: float
    objective: float


class GridBias:
    """Values, variances and bias estimates for one predictor and shrink kind over a lam grid."""

    def __init__(self, inp: DRInputs, scheme: WeightScheme, kind: str, lams: np.ndarray, abs_diff=None):
        self.inp = inp
        self.scheme = scheme
        self.kind = kind
        self.lams = np.asarray(lams, dtype=np.float64)
        n = inp.n
        self.terms = grid_terms(inp, kind, self.lams)
        self.values = self.terms.mean(axis=1)
        self.var_hat = _rows_var_of_mean(self.terms) if n >= 2 else np.full(len(self.lams), np.nan)
        w_hat = apply_map(kind, inp.w[None, :], self.lams[:, None])
        self._direct_terms = (w_hat - inp.w[None, :]) * inp.residuals[None, :]
        # |w_hat - w| over all actions depends only on (target, logging, kind, lams), so
        # grids for different predictors on the same data may share it
        self._abs_diff = abs_diff
        self._opt_parts = None

    def _all_actions(self):
        """``|w_hat - w|`` for every action and grid point, shape ``(G, n, k)``."""
        if self._abs_diff is None:
            w_all = self.inp.w_all()
            self._abs_diff = np.abs(apply_map(self.kind, w_all[None], self.lams[:, None, None]) - w_all[None])
        return self._abs_diff

    # -- raw estimates and their per-sample pieces

    def direct(self):
        t = self._direct_terms
        return np.abs(t.mean(axis=1)), t

    def pessimistic(self):
        # sum_a pi |w_hat/w - 1| = sum_{a: pi > 0} mu |w_hat - w|
        mu = self.inp.data.logging_probs
        per_ctx = np.einsum("gnk,nk->gn", self._all_actions(), np.where(self.inp.pi_all > 0, mu, 0.0))
        return per_ctx.mean(axis=1), per_ctx

    def optimistic_parts(self):
        """Per-sample pieces of ``T1`` (shape (n,)) and ``T2`` (shape (G, n))."""
        if self._opt_parts is None:
            diff = self._all_actions()
            mu = self.inp.data.logging_probs
            z_all = self.scheme.all_action_weights(self.inp.data)
            bad = (z_all <= 0) & (mu > 0)
            if np.any(bad) and np.any(diff[:, bad] > 0):
                raise ZeroWeightScheme(f"scheme {self.scheme.kind!r} has z = 0 where the weight is shrunk")
            coef = np.where(z_all > 0, mu / np.where(z_all > 0, z_all, 1.0), 0.0)
            t2 = np.einsum("gnk,gnk,nk->gn", diff, diff, coef)
            t1 = self.scheme.sample_weights(self.inp.data) * self.inp.residuals**2
            self._opt_parts = (t1, t2)
        return self._opt_parts

    def optimistic(self):
        t1, t2 = self.optimistic_parts()
        return np.sqrt(t1.mean() * t2.mean(axis=1))

    # -- bounds

    def bound(self, mode: str, inflate: str = "none", delta: float = BERNSTEIN_DELTA) -> np.ndarray:
        if inflate not in INFLATIONS:
            raise ValueError(f"unknown inflation {inflate!r}")
        n = self.inp.n
        if inflate != "none" and n < 2:
            raise TooFewSamples("inflated bounds need n >= 2")
        log2d = math.log(2.0 / delta)
        if mode == "direct":
            est, terms = self.direct()
            if inflate == "two_se":
                return est + 2.0 * _se(terms)
            if inflate == "bernstein":
                w2 = float(np.mean(self.inp.w**2))
                w_inf = self._w_max()
                return est + math.sqrt(2.0 * w2 * log2d / n) + 2.0 * w_inf * log2d / (3.0 * n)
            return est
        if mode == "pessimistic":
            est, per_ctx = self.pessimistic()
            if inflate == "two_se":
                return est + 2.0 * _se(per_ctx)
            if inflate == "bernstein":
                return est + math.sqrt(math.log(1.0 / delta) / (2.0 * n))
            return est
        if mode == "optimistic":
            t1, t2 = self.optimistic_parts()
            a, b = t1.mean(), t2.mean(axis=1)
            if inflate == "two_se":
                a = a + 2.0 * _se(t1)
                b = b + 2.0 * _se(t2)
            elif inflate == "bernstein":
                z = self.scheme.sample_weights(self.inp.data)
                z_all = self.scheme.all_action_weights(self.inp.data)
                w_all = self.inp.w_all()
                ok = (z_all > 0) & (w_all > 0)
                wz_max = float(np.max(w_all[ok] / z_all[ok], initial=0.0))
                a = a + math.sqrt(2.0 * float(np.mean(z * z)) * log2d / n) + 2.0 * float(z_all.max()) * log2d / (3.0 * n)
                b = b + math.sqrt(wz_max * log2d / (2.0 * n))
            return np.sqrt(a * b)
        raise ValueError(f"unknown bias mode {mode!r}")

    def _w_max(self) -> float:
        if self.inp.data.logging_probs is not None:
            return float(self.inp.w_all().max())
        return float(self.inp.w.max())

    def bias_ub(self, modes: Sequence[str], inflate: str = "none") -> np.ndarray:
        """Pointwise minimum over the requested bounds; unavailable bounds are skipped."""
        best = np.full(len(self.lams), INF)
        for mode in modes:
            try:
                best = np.minimum(best, self.bound(mode, inflate))
            except ZeroWeightScheme:
                continue
        return best


def _single(data, target, predictor, wmap: WeightMap, scheme) -> GridBias:
    scheme = scheme if scheme is not None else WeightScheme("const1")
    return GridBias(DRInputs(data, target, predictor), scheme, wmap.kind, np.array([wmap.lam]))


def bias_estimate(
    mode: str,
    data: LoggedData,
    target: Policy,
    predictor: RewardPredictor,
    wmap: WeightMap,
    scheme: WeightScheme | None = None,
) -> float:
    """One of the three raw bias estimates for a single weight map."""
    return float(bias_upper(mode, "none", data, target, predictor, wmap, scheme))


def bias_upper(
    mode: str,
    inflate: str,
    data: LoggedData,
    target: Policy,
    predictor: RewardPredictor,
    wmap: WeightMap,
    scheme: WeightScheme | None = None,
) -> float:
    return float(_single(data, target, predictor, wmap, scheme).bound(mode, inflate)[0])


@dataclass
class ScoredSpecs:
    specs: list
    values: np.ndarray
    scores: list
    terms: dict

    @property
    def objectives(self) -> np.ndarray:
        return np.array([s.objective for s in self.scores])


def score_specs(
    specs: Sequence[EstimatorSpec],
    data: LoggedData,
    target: Policy,
    predictors: Mapping[str, tuple],
    modes: Sequence[str] = BIAS_MODES,
    inflate: str = "none",
    keep_terms: bool = False,
) -> ScoredSpecs:
    """Estimate, variance and bias bound for every spec.

    ``predictors`` maps a predictor id to ``(RewardPredictor, WeightScheme)``.
    Specs sharing a predictor and shrink kind are evaluated as one grid.
    """
    specs = list(specs)
    values = np.empty(len(specs))
    scores: list = [None] * len(specs)
    terms = {}
    groups: dict = {}
    for i, s in enumerate(specs):
        groups.setdefault((s.predictor, s.kind), []).append(i)
    inputs = {}
    for (pid, kind), idx in groups.items():
        predictor, scheme = predictors[pid]
        if pid not in inputs:
            inputs[pid] = DRInputs(data, target, predictor)
        g = GridBias(inputs[pid], scheme, kind, np.array([specs[i].lam for i in idx]))
        ub = g.bias_ub(modes, inflate)
        for j, i in enumerate(idx):
            values[i] = g.values[j]
            scores[i] = SelectionScore(float(ub[j]), float(g.var_hat[j]), float(ub[j] ** 2 + g.var_hat[j]))
            if keep_terms:
                terms[i] = g.terms[j]
    return ScoredSpecs(specs, values, scores, terms)


def argmin_objective(specs: Sequence[EstimatorSpec], scores: Sequence[SelectionScore]) -> int:
    """Index minimizing the objective; ties by smaller bias bound, smaller lam, then order."""
    keys = [(s.objective, s.bias_ub, spec.lam, i) for i, (spec, s) in enumerate(zip(specs, scores))]
    return min(keys)[3]


def select(
    specs: Sequence[EstimatorSpec],
    data: LoggedData,
    target: Policy,
    predictors: Mapping[str, tuple],
    mode_policy: str = "DRs-direct",
):
    """Pick ``theta`` minimizing ``BiasUB^2 + Var_hat``.

    Returns ``(chosen spec, scores, scored)`` where ``scores`` follows the
    order of ``specs`` and ``scored`` carries the value of every spec.
    """
    if not specs:
        raise ValueError("specs must be nonempty")
    modes, inflate = MODE_POLICIES[mode_policy]
    scored = score_specs(specs, data, target, predictors, modes, inflate)
    best = argmin_objective(scored.specs, scored.scores)
    return scored.specs[best], scored.scores, scored


def oracle_select(per_replicate_estimates: np.ndarray, truth: float) -> np.ndarray:
    """Per replicate (row), the column index minimizing ``(estimate - truth)^2``."""
    est = np.atleast_2d(np.asarray(per_replicate_estimates, dtype=np.float64))
    return np.argmin((est - truth) ** 2, axis=1)


def build_specs(predictor_ids: Sequence[str], kinds: Sequence[str], grids: Mapping[str, np.ndarray]) -> list:
    """Cartesian product of predictors and kinds, each kind with its own grid."""
    return [EstimatorSpec(p, k, float(lam)) for p in predictor_ids for k in kinds for lam in grids[k]]


SELECTION_HEADER = ["spec_id", "predictor", "shrink_kind", "lambda", "bias_ub", "var_hat", "objective", "chosen"]


def write_selection_report(path, specs, scores, chosen_index: int) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SELECTION_HEADER)
        for i, (spec, s) in enumerate(zip(specs, scores)):
            w.writerow([spec.spec_id, spec.predictor, spec.kind, repr(spec.lam), repr(s.bias_ub),
                        repr(s.variance_hat), repr(s.objective), int(i == chosen_index)])
