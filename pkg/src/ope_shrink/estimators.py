"""Atomic-action value estimators: DM, IPS, DR and DR with weight shrinkage.

Every estimator is a doubly robust form

    Z_i = sum_a pi(a|x_i) eta_hat(x_i, a) + w_hat(w_i) (r_i - eta_hat(x_i, a_i)),

differing only in the weight map ``w_hat``.  The identity map gives DR, the
zero map gives DM, and ``eta_hat == 0`` with the identity map gives IPS.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import LoggedData, Policy
from .errors import AbsoluteContinuityViolation, EmptyDataset
from .reward_model import RewardPredictor, ZeroPredictor

INF = math.inf
SHRINK_KINDS = ("identity", "pessimistic", "optimistic", "zero", "switch")


def shrink_pessimistic(w, lam):
    """Clip: ``min(lam, w)``."""
    return np.minimum(lam, w)


def shrink_optimistic(w, lam):
    """``lam * w / (w^2 + lam)``; ``w`` itself at ``lam = inf`` and 0 at ``lam = 0``."""
    w = np.asarray(w, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    # written as w / (1 + w^2/lam) so that lam = inf returns w bit for bit
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = w / (1.0 + w * w / lam)
    if np.any(lam == 0):
        out = np.where(lam == 0, 0.0, out)
    return out


def shrink_switch(w, tau):
    """Keep ``w`` where ``w <= tau`` and drop it otherwise."""
    return np.where(w <= tau, w, 0.0)


@dataclass(frozen=True)
class WeightMap:
    """A shrinkage map ``w -> w_hat`` with ``0 <= w_hat <= w``.

    ``lam = inf`` is a valid value and reproduces the identity exactly for
    both shrinkage kinds, so DR is an ordinary grid member.
    """

    kind: str = "identity"
    lam: float = INF

    def __post_init__(self):
        if self.kind not in SHRINK_KINDS:
            raise ValueError(f"unknown shrinkage kind {self.kind!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")

    def __call__(self, w):
        return apply_map(self.kind, w, self.lam)

    def derivative(self, w):
        """``d w_hat / d w``; the clipped branch of the pessimistic map has slope 0."""
        w = np.asarray(w, dtype=np.float64)
        if self.kind == "identity":
            return np.ones_like(w)
        if self.kind == "zero":
            return np.zeros_like(w)
        lam = self.lam
        if self.kind == "pessimistic":
            return np.where(w < lam, 1.0, 0.0)
        if self.kind == "switch":
            return np.where(w <= lam, 1.0, 0.0)
        if math.isinf(lam):
            return np.ones_like(w)
        if lam == 0:
            return np.zeros_like(w)
        return lam * (lam - w * w) / (w * w + lam) ** 2


def apply_map(kind: str, w, lam):
    """Apply a shrinkage map; ``lam`` may be an array broadcast against ``w``."""
    if kind == "identity":
        return np.array(w, dtype=np.float64)
    if kind == "zero":
        return np.zeros_like(np.asarray(w, dtype=np.float64))
    if kind == "pessimistic":
        return shrink_pessimistic(w, lam)
    if kind == "optimistic":
        return shrink_optimistic(w, lam)
    if kind == "switch":
        return shrink_switch(w, lam)
    raise ValueError(f"unknown shrinkage kind {kind!r}")


@dataclass(frozen=True, eq=False)
class EstimateBreakdown:
    """Value plus per-sample terms ``Z_i`` (``value == mean(terms)``).

    For non-self-normalized estimators ``value`` equals
    ``dm_component + correction_component`` up to rounding.
    """

    value: float
    terms: np.ndarray
    dm_component: float
    correction_component: float


class DRInputs:
    """Per-sample quantities shared by every estimator on one (data, target, predictor).

    Attributes
    ----------
    pi_all : (n, k) target probabilities
    eta_all : (n, k) predicted rewards for every action
    dm_terms : (n,) ``sum_a pi(a|x_i) eta_hat(x_i, a)``
    w : (n,) importance weight of the logged action
    residuals : (n,) ``r_i - eta_hat(x_i, a_i)``
    """

    def __init__(self, data: LoggedData, target: Policy, predictor: RewardPredictor):
        if len(data) == 0:
            raise EmptyDataset("no samples")
        n = len(data)
        rows = np.arange(n)
        self.data = data
        self.target = target
        self.predictor = predictor
        self.pi_all = target.probs_for(data)
        self.eta_all = predictor.predict_all(data.features)
        self.dm_terms = np.sum(self.pi_all * self.eta_all, axis=1)
        if np.any(data.propensities <= 0):
            raise AbsoluteContinuityViolation("logged propensities must be positive")
        self.w = self.pi_all[rows, data.actions] / data.propensities
        self.residuals = data.rewards - self.eta_all[rows, data.actions]
        self._w_all = None

    @property
    def n(self) -> int:
        return len(self.w)

    def w_all(self) -> np.ndarray:
        """Importance weights for every action, ``pi/mu`` (0 where ``pi = 0``)."""
        if self._w_all is None:
            mu = self.data.logging_probs
            if mu is None:
                raise ValueError("this quantity needs the full logging distribution (logging_probs)")
            with np.errstate(divide="ignore", invalid="ignore"):
                self._w_all = np.where(self.pi_all > 0, self.pi_all / mu, 0.0)
        return self._w_all


def _breakdown(dm_terms: np.ndarray, corrections: np.ndarray) -> EstimateBreakdown:
    terms = dm_terms + corrections
    return EstimateBreakdown(float(np.mean(terms)), terms, float(np.mean(dm_terms)), float(np.mean(corrections)))


def dm_estimate(data: LoggedData, target: Policy, predictor: RewardPredictor) -> EstimateBreakdown:
    inp = DRInputs(data, target, predictor)
    terms = inp.dm_terms.copy()
    return EstimateBreakdown(float(np.mean(terms)), terms, float(np.mean(terms)), 0.0)


def drs_from_inputs(inp: DRInputs, wmap: WeightMap, self_normalized: bool = False) -> EstimateBreakdown:
    w_hat = wmap(inp.w)
    if self_normalized:
        total = float(np.sum(w_hat))
        w_hat = w_hat * (inp.n / total) if total > 0 else np.zeros_like(w_hat)
    return _breakdown(inp.dm_terms, w_hat * inp.residuals)


def drs_estimate(
    data: LoggedData,
    target: Policy,
    predictor: RewardPredictor,
    wmap: WeightMap = WeightMap(),
    self_normalized: bool = False,
) -> EstimateBreakdown:
    """DR with shrunk weights.

    With ``self_normalized`` the correction weights are rescaled to
    ``w_hat_i * n / sum_j w_hat_j`` (the DM term is left alone); a zero weight
    sum makes the correction vanish.
    """
    return drs_from_inputs(DRInputs(data, target, predictor), wmap, self_normalized)


def dr_estimate(data, target, predictor, self_normalized: bool = False) -> EstimateBreakdown:
    return drs_estimate(data, target, predictor, WeightMap("identity"), self_normalized)


def ips_estimate(data: LoggedData, target: Policy, self_normalized: bool = False) -> EstimateBreakdown:
    return dr_estimate(data, target, ZeroPredictor(data.k), self_normalized)


def switch_dr_estimate(data, target, predictor, tau: float) -> EstimateBreakdown:
    """SWITCH-DR: DM over all actions plus the DR correction only where ``w <= tau``.

    Written out, ``Z_i = sum_a pi eta_hat + w_i 1{w_i <= tau} (r_i - eta_hat_i)``,
    which is DR with the weight map ``w -> w 1{w <= tau}``.
    """
    if not tau >= 0:
        raise ValueError("tau must be >= 0")
    return drs_estimate(data, target, predictor, WeightMap("switch", tau))


def grid_terms(inp: DRInputs, kind: str, lams: np.ndarray, self_normalized: bool = False) -> np.ndarray:
    """Per-sample terms for a whole grid of ``lam`` values, shape ``(G, n)``."""
    lams = np.asarray(lams, dtype=np.float64)
    w_hat = apply_map(kind, inp.w[None, :], lams[:, None])
    if self_normalized:
        tot = w_hat.sum(axis=1, keepdims=True)
        w_hat = np.where(tot > 0, w_hat * (inp.n / np.where(tot > 0, tot, 1.0)), 0.0)
    return inp.dm_terms[None, :] + w_hat * inp.residuals[None, :]


def estimate_value(
    name: str,
    data: LoggedData,
    target: Policy,
    predictor: Optional[RewardPredictor] = None,
    lam: float = INF,
) -> EstimateBreakdown:
    """Dispatch by estimator name: dm, ips, snips, dr, sndr, dros, drps, switch."""
    if name == "ips":
        return ips_estimate(data, target)
    if name == "snips":
        return ips_estimate(data, target, self_normalized=True)
    if predictor is None:
        raise ValueError(f"{name} needs a reward predictor")
    table = {
        "dm": lambda: dm_estimate(data, target, predictor),
        "dr": lambda: dr_estimate(data, target, predictor),
        "sndr": lambda: dr_estimate(data, target, predictor, self_normalized=True),
        "dros": lambda: drs_estimate(data, target, predictor, WeightMap("optimistic", lam)),
        "drps": lambda: drs_estimate(data, target, predictor, WeightMap("pessimistic", lam)),
        "switch": lambda: switch_dr_estimate(data, target, predictor, lam),
    }
    if name not in table:
        raise ValueError(f"unknown estimator {name!r}")
    return table[name]()
