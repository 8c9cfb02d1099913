"""Logging and target policies: linear scorers, argmax, softening, softmax-linear."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from .core import FullInfoDataset, Policy
from .errors import InvalidSoftening, NonConvergence
from .rng import STREAM_SOFTEN, uniform_from_keys

MASKS = ("first_half", "second_half", "all")


def mask_columns(mask: str, feature_dim: int) -> np.ndarray:
    half = feature_dim // 2
    if mask == "first_half":
        return np.arange(0, half)
    if mask == "second_half":
        return np.arange(half, feature_dim)
    if mask == "all":
        return np.arange(feature_dim)
    raise ValueError(f"unknown mask {mask!r}; expected one of {MASKS}")


@dataclass(frozen=True, eq=False)
class LinearScorer:
    """Per-class linear scores on a subset of the features.

    ``weights`` has shape ``(k, n_selected + 1)``; the last column is the
    per-class intercept.
    """

    weights: np.ndarray
    mask: str
    feature_dim: int

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        cols = mask_columns(self.mask, self.feature_dim)
        if w.ndim != 2 or w.shape[1] != len(cols) + 1:
            raise ValueError(f"weights must have shape (k, {len(cols) + 1})")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def design(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)[:, mask_columns(self.mask, self.feature_dim)]
        return np.hstack([x, np.ones((x.shape[0], 1))])

    def scores(self, features: np.ndarray) -> np.ndarray:
        return self.design(features) @ self.weights.T

    def to_json(self) -> str:
        return json.dumps({"weights": self.weights.tolist(), "mask": self.mask, "feature_dim": self.feature_dim})

    @classmethod
    def from_json(cls, text: str) -> "LinearScorer":
        obj = json.loads(text)
        w = np.asarray(obj["weights"], dtype=np.float64)
        dim = obj.get("feature_dim")
        if dim is None:
            if obj["mask"] != "all":
                raise ValueError("feature_dim required for half masks")
            dim = w.shape[1] - 1
        return cls(w, obj["mask"], int(dim))


def _logistic_loss_grad(theta, X, Y, k, reg):
    n, p = X.shape
    W = theta.reshape(k, p)
    S = X @ W.T
    lse = logsumexp(S, axis=1)
    loss = np.mean(lse - np.sum(S * Y, axis=1))
    P = np.exp(S - lse[:, None])
    G = (P - Y).T @ X / n
    Wr = W.copy()
    Wr[:, -1] = 0.0  # intercept is not penalized
    loss += 0.5 * reg * np.sum(Wr * Wr)
    G += reg * Wr
    return loss, G.ravel()


def train_multinomial_logistic(
    data: FullInfoDataset,
    mask: str = "all",
    reg: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = 5000,
    strict: bool = True,
) -> LinearScorer:
    """Fit an l2-regularized multinomial logistic model from a zero start.

    The objective is the per-sample averaged cross-entropy plus
    ``reg/2 * ||W||^2`` (intercepts unpenalized).  Optimization stops once the
    Euclidean gradient norm is at most ``tol``.  With ``strict`` a miss raises
    :class:`NonConvergence`; otherwise the last iterate is returned.
    """
    if reg <= 0:
        raise ValueError("reg must be positive")
    k = data.k
    scorer0 = LinearScorer(np.zeros((k, len(mask_columns(mask, data.feature_dim)) + 1)), mask, data.feature_dim)
    X = scorer0.design(data.features)
    Y = np.zeros((len(data), k))
    Y[np.arange(len(data)), data.labels] = 1.0
    theta = np.zeros(k * X.shape[1])

    def gnorm(t):
        return float(np.linalg.norm(_logistic_loss_grad(t, X, Y, k, reg)[1]))

    if max_iter > 0 and gnorm(theta) > tol:
        res = minimize(
            _logistic_loss_grad, theta, args=(X, Y, k, reg), jac=True, method="L-BFGS-B",
            options={"maxiter": max_iter, "gtol": tol / np.sqrt(theta.size), "ftol": 0.0},
        )
        theta = res.x
        # polish with backtracking gradient steps if L-BFGS stopped short of the norm target
        for _ in range(max_iter):
            f, g = _logistic_loss_grad(theta, X, Y, k, reg)
            if np.linalg.norm(g) <= tol:
                break
            t = 1.0
            while t > 1e-12:
                cand = theta - t * g
                if _logistic_loss_grad(cand, X, Y, k, reg)[0] <= f - 0.5 * t * g @ g:
                    break
                t *= 0.5
            theta = cand
    if gnorm(theta) > tol and strict:
        raise NonConvergence(f"gradient norm {gnorm(theta):.3g} above tol {tol:g} after {max_iter} iterations")
    return LinearScorer(theta.reshape(k, X.shape[1]), mask, data.feature_dim)


class DeterministicPolicy(Policy):
    """Argmax of a scorer; ties go to the lowest action index."""

    kind = "deterministic-argmax"

    def __init__(self, scorer: LinearScorer):
        self.scorer = scorer
        self.k = scorer.k

    def actions(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.scorer.scores(features), axis=1)

    def probs(self, features, ids):
        a = self.actions(features)
        out = np.zeros((len(a), self.k))
        out[np.arange(len(a)), a] = 1.0
        return out

    @property
    def is_deterministic(self) -> bool:
        return True


def deterministic_policy(scorer: LinearScorer) -> DeterministicPolicy:
    return DeterministicPolicy(scorer)


@dataclass(frozen=True)
class SofteningParams:
    alpha: float
    beta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.alpha - 0.5 * self.beta, self.alpha + 0.5 * self.beta
        if self.beta < 0 or lo < 0 or hi > 1:
            raise InvalidSoftening(
                f"alpha={self.alpha}, beta={self.beta}: alpha + beta*u must stay in [0, 1] for u in [-0.5, 0.5]"
            )


class SoftenedPolicy(Policy):
    """Mix a deterministic base policy toward uniform over the other actions.

    On context ``x`` the base action gets ``alpha + beta*u`` and every other
    action ``(1 - alpha - beta*u)/(k - 1)``, with ``u ~ Unif[-0.5, 0.5]`` drawn
    once per context id from ``params.seed``.
    """

    kind = "softened"

    def __init__(self, base: Policy, params: SofteningParams, k: Optional[int] = None):
        self.base = base
        self.params = params
        self.k = base.k if k is None else k
        if self.k != base.k:
            raise ValueError("k does not match base policy")

    def noise(self, ids: np.ndarray) -> np.ndarray:
        return uniform_from_keys(self.params.seed, np.asarray(ids, dtype=np.int64), STREAM_SOFTEN) - 0.5

    def probs(self, features, ids):
        chosen = np.argmax(self.base.probs(features, ids), axis=1)
        n = len(chosen)
        if self.k == 1:
            return np.ones((n, 1))
        top = self.params.alpha + self.params.beta * self.noise(ids)
        if np.any(top < 0) or np.any(top > 1):
            raise InvalidSoftening("softened probability outside [0, 1]")
        out = np.repeat(((1.0 - top) / (self.k - 1))[:, None], self.k, axis=1)
        out[np.arange(n), chosen] = top
        return out


def soften(base: Policy, params: SofteningParams, k: Optional[int] = None) -> SoftenedPolicy:
    if not base.is_deterministic:
        raise InvalidSoftening("softening requires a deterministic base policy")
    return SoftenedPolicy(base, params, k)


Featurizer = Callable[[np.ndarray], np.ndarray]


class SoftmaxLinearPolicy(Policy):
    """``pi_u(a|x)`` proportional to ``exp(u . f(x, a))``.

    ``featurizer`` maps an ``(n, d)`` feature block to an ``(n, k, p)`` tensor
    of joint features.
    """

    kind = "softmax-linear"

    def __init__(self, u: np.ndarray, featurizer: Featurizer, k: int):
        self.u = np.asarray(u, dtype=np.float64)
        self.featurizer = featurizer
        self.k = k

    def scores(self, features: np.ndarray) -> np.ndarray:
        return self.featurizer(features) @ self.u

    def probs(self, features, ids):
        return softmax(self.scores(features), axis=1)


def softmax_linear_policy(u: np.ndarray, featurizer: Optional[Featurizer] = None, k: Optional[int] = None) -> SoftmaxLinearPolicy:
    """Build ``pi_u``; the default featurizer is the block one-hot joint layout."""
    if featurizer is None:
        from .reward_model import JointFeaturizer

        if k is None:
            raise ValueError("k is required with the default featurizer")
        featurizer = JointFeaturizer(k)
    if k is None:
        k = getattr(featurizer, "k")
    return SoftmaxLinearPolicy(u, featurizer, k)
