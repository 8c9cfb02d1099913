"""Reward predictors fit by weighted ridge regression.

The regression target is ``argmin_f (1/m) sum_j z_j (f(x_j, a_j) - r_j)^2 +
reg * ||theta||^2`` over linear ``f`` in a block one-hot joint feature map,
where the per-sample weight ``z`` comes from a :class:`WeightScheme`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .core import LoggedData, Policy
from .errors import SingularSystem
from .rng import STREAM_MRDR, uniform_from_keys

SCHEMES = ("const1", "w", "w_sq", "mrdr", "inv_mu", "inv_mu_sq", "zero_predictor")
RESIDUAL_TOL = 1e-8


def joint_featurize(x: np.ndarray, a: int, k: int) -> np.ndarray:
    """Place ``(x, 1)`` in block ``a`` of a ``k``-block vector of length ``k*(d+1)``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d = len(x)
    out = np.zeros(k * (d + 1))
    out[a * (d + 1): a * (d + 1) + d] = x
    out[a * (d + 1) + d] = 1.0
    return out


def joint_features(features: np.ndarray, actions: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`joint_featurize`, shape ``(n, k*(d+1))``."""
    X = np.asarray(features, dtype=np.float64)
    n, d = X.shape
    out = np.zeros((n, k, d + 1))
    rows = np.arange(n)
    out[rows, actions, :d] = X
    out[rows, actions, d] = 1.0
    return out.reshape(n, k * (d + 1))


class JointFeaturizer:
    """``X -> (n, k, k*(d+1))`` tensor of joint features for every action."""

    def __init__(self, k: int):
        self.k = k

    def __call__(self, features: np.ndarray) -> np.ndarray:
        X = np.asarray(features, dtype=np.float64)
        n, d = X.shape
        out = np.zeros((n, self.k, self.k, d + 1))
        idx = np.arange(self.k)
        out[:, idx, idx, :d] = X[:, None, :]
        out[:, idx, idx, d] = 1.0
        return out.reshape(n, self.k, self.k * (d + 1))


@dataclass(frozen=True, eq=False)
class WeightScheme:
    """Regression weight ``z(x, a)``.

    ``w`` and ``w_sq`` use importance weights of ``target``; ``mrdr`` uses the
    target's (possibly sampled) deterministic choice; ``inv_mu``/``inv_mu_sq``
    depend on the logging propensity only.  ``zero_predictor`` fits nothing
    (the predictor is identically 0) and uses ``z = 1`` wherever a weight is
    needed for a loss or bound.
    """

    kind: str
    target: Optional[Policy] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if self.kind in ("w", "w_sq", "mrdr") and self.target is None:
            raise ValueError(f"scheme {self.kind!r} needs a target policy")

    def sample_weights(self, data: LoggedData) -> np.ndarray:
        """``z(x_i, a_i)`` for every logged sample."""
        n = len(data)
        mu = data.propensities
        if self.kind in ("const1", "zero_predictor"):
            return np.ones(n)
        if self.kind in ("inv_mu", "inv_mu_sq"):
            return mu ** (-1.0 if self.kind == "inv_mu" else -2.0)
        if self.kind == "mrdr":
            return mrdr_weights(data, self.target, self.seed)
        w = self.target.probs_for(data)[np.arange(n), data.actions] / mu
        return w if self.kind == "w" else w * w

    def all_action_weights(self, data: LoggedData) -> np.ndarray:
        """``z(x_i, a)`` for every sample and every action, shape ``(n, k)``.

        Requires ``data.logging_probs``; entries where ``mu(a|x) = 0`` are 0.
        """
        n, k = len(data), data.k
        if self.kind in ("const1", "zero_predictor"):
            return np.ones((n, k))
        if data.logging_probs is None:
            raise ValueError("all-action regression weights need logging_probs on the data")
        mu = data.logging_probs
        pos = mu > 0
        safe = np.where(pos, mu, 1.0)
        if self.kind == "inv_mu":
            return np.where(pos, 1.0 / safe, 0.0)
        if self.kind == "inv_mu_sq":
            return np.where(pos, 1.0 / safe**2, 0.0)
        if self.kind == "mrdr":
            chosen = _mrdr_choices(data, self.target, self.seed)
            ind = np.zeros((n, k))
            ind[np.arange(n), chosen] = 1.0
            return np.where(pos, ind * (1.0 - mu) / safe**2, 0.0)
        w = np.where(pos, self.target.probs_for(data) / safe, 0.0)
        return w if self.kind == "w" else w * w


def _mrdr_choices(data: LoggedData, target: Policy, seed: int) -> np.ndarray:
    pi = target.probs_for(data)
    cum = np.cumsum(pi, axis=1)
    u = uniform_from_keys(seed, np.arange(len(data)), STREAM_MRDR) * cum[:, -1]
    chosen = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(chosen, data.k - 1)


def mrdr_weights(data: LoggedData, target: Policy, seed: int = 0) -> np.ndarray:
    """``z = 1{a_tilde = a}(1 - mu)/mu^2`` with ``a_tilde`` the target's choice.

    For a deterministic target ``a_tilde = pi(x)``.  For a stochastic target,
    one action per sample index is drawn from ``pi(.|x_i)`` (seeded) and then
    treated as the deterministic choice.
    """
    chosen = _mrdr_choices(data, target, seed)
    mu = data.propensities
    return np.where(chosen == data.actions, (1.0 - mu) / mu**2, 0.0)


def solve_weighted_ridge(Phi: np.ndarray, y: np.ndarray, z: np.ndarray, reg: float) -> np.ndarray:
    """Minimize ``(1/m) sum z_j (Phi_j . theta - y_j)^2 + reg * ||theta||^2``.

    Solved by Cholesky on the regularized normal equations, with one step of
    iterative refinement; the normal-equation residual must end below 1e-8.
    """
    m, p = Phi.shape
    if reg < 0:
        raise ValueError("reg must be nonnegative")
    A = (Phi * z[:, None]).T @ Phi / m + reg * np.eye(p)
    b = Phi.T @ (z * y) / m
    if reg == 0 and (not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e12):
        raise SingularSystem("normal matrix is singular; use reg > 0")
    try:
        factor = scipy.linalg.cho_factor(A)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    theta = scipy.linalg.cho_solve(factor, b)
    r = b - A @ theta
    if np.max(np.abs(r), initial=0.0) > RESIDUAL_TOL:
        theta = theta + scipy.linalg.cho_solve(factor, r)
        r = b - A @ theta
    if np.max(np.abs(r), initial=0.0) > RESIDUAL_TOL * max(1.0, float(np.max(np.abs(b), initial=0.0))):
        raise SingularSystem(f"normal-equation residual {np.max(np.abs(r)):.3g} above tolerance")
    return theta


class RewardPredictor:
    """Linear reward model ``theta . phi(x, a)``, optionally clamped to [0, 1]."""

    def __init__(self, coef: np.ndarray, k: int, reg: float = 1.0, clamp: bool = True, scheme: str = "const1"):
        self.coef = np.asarray(coef, dtype=np.float64)
        self.k = k
        self.reg = reg
        self.clamp = clamp
        self.scheme = scheme
        if len(self.coef) % k:
            raise ValueError("coefficient length must be a multiple of k")

    @property
    def feature_dim(self) -> int:
        return len(self.coef) // self.k - 1

    def _finish(self, pred):
        return np.clip(pred, 0.0, 1.0) if self.clamp else pred

    def predict_all(self, features: np.ndarray) -> np.ndarray:
        """Predictions for every action, shape ``(n, k)``."""
        X = np.asarray(features, dtype=np.float64)
        blocks = self.coef.reshape(self.k, -1)
        return self._finish(X @ blocks[:, :-1].T + blocks[:, -1])

    def predict(self, features: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.predict_all(features)[np.arange(len(actions)), actions]

    def to_json(self) -> str:
        return json.dumps({"coef": self.coef.tolist(), "k": self.k, "reg": self.reg,
                           "clamp": self.clamp, "scheme": self.scheme})

    @classmethod
    def from_json(cls, text: str) -> "RewardPredictor":
        o = json.loads(text)
        if o["scheme"] == "zero_predictor":
            return ZeroPredictor(o["k"])
        return cls(np.asarray(o["coef"]), o["k"], o["reg"], o["clamp"], o["scheme"])


class ZeroPredictor(RewardPredictor):
    """``eta_hat == 0``; DR with this predictor is IPS."""

    def __init__(self, k: int):
        super().__init__(np.zeros(k), k, reg=0.0, clamp=True, scheme="zero_predictor")

    def predict_all(self, features):
        return np.zeros((np.asarray(features).shape[0], self.k))


def fit_weighted_ridge(
    data: LoggedData,
    scheme: WeightScheme,
    reg: float = 1.0,
    clamp: bool = True,
) -> RewardPredictor:
    if scheme.kind == "zero_predictor":
        return ZeroPredictor(data.k)
    z = scheme.sample_weights(data)
    Phi = joint_features(data.features, data.actions, data.k)
    coef = solve_weighted_ridge(Phi, data.rewards, z, reg)
    return RewardPredictor(coef, data.k, reg, clamp, scheme.kind)


def loss_L(predictor: RewardPredictor, data: LoggedData, scheme: WeightScheme) -> float:
    """Sample average of ``z (r - eta_hat(x, a))^2``."""
    res = data.rewards - predictor.predict(data.features, data.actions)
    return float(np.mean(scheme.sample_weights(data) * res * res))
