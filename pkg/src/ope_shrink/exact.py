"""Exact expectations by enumerating every logged sequence of a small instance.

With finitely many contexts and actions, a single logged record is one of a
finite set of outcomes ``(x, a)`` with probability ``p(x) mu(a|x)``, and an
``n``-sample log is a sequence of ``n`` independent outcomes.  Summing over all
sequences gives the exact mean and variance of any estimator.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .core import LoggedData, TabularPolicy
from .reward_model import RewardPredictor
from .slate import LoggedSlateData, SlateBasis, prepare_state


def enumerate_iid(probs: np.ndarray, n: int) -> Iterator[tuple]:
    """Every length-``n`` sequence of outcome indices with its probability (zero-probability outcomes skipped)."""
    probs = np.asarray(probs, dtype=np.float64)
    support = np.flatnonzero(probs > 0)
    for seq in itertools.product(support, repeat=n):
        yield float(np.prod(probs[list(seq)])), seq


def exact_mean_var(probs: np.ndarray, n: int, estimate: Callable[[tuple], float]) -> tuple:
    """Exact ``(E[V_hat], Var[V_hat])`` where ``estimate`` maps a sequence of outcome indices to a value."""
    m1 = m2 = 0.0
    for p, seq in enumerate_iid(probs, n):
        v = estimate(seq)
        m1 += p * v
        m2 += p * v * v
    return m1, m2 - m1 * m1


@dataclass(frozen=True, eq=False)
class AtomicInstance:
    """Contexts ``0..C-1`` with probabilities ``p_x``; deterministic rewards ``eta[x, a]``."""

    p_x: np.ndarray
    mu: np.ndarray
    pi: np.ndarray
    eta: np.ndarray

    @property
    def k(self) -> int:
        return self.mu.shape[1]

    @property
    def n_contexts(self) -> int:
        return len(self.p_x)

    def outcome_probs(self) -> np.ndarray:
        """Flat ``p(x) mu(a|x)`` indexed by ``x*k + a``."""
        return (self.p_x[:, None] * self.mu).ravel()

    def true_value(self) -> float:
        return float(np.sum(self.p_x[:, None] * self.pi * self.eta))

    @property
    def target(self) -> TabularPolicy:
        return TabularPolicy(self.pi)

    def logged(self, seq) -> LoggedData:
        xs = np.array([s // self.k for s in seq])
        acts = np.array([s % self.k for s in seq])
        return LoggedData(xs, np.eye(self.n_contexts)[xs], acts, self.eta[xs, acts], self.mu[xs, acts], self.k,
                          logging_probs=self.mu[xs])


def tabular_predictor(eta_hat: np.ndarray) -> RewardPredictor:
    """Predictor returning ``eta_hat[x, a]`` on one-hot context features."""
    C, k = eta_hat.shape
    coef = np.hstack([eta_hat.T, np.zeros((k, 1))]).ravel()
    return RewardPredictor(coef, k, reg=0.0, clamp=False, scheme="const1")


@dataclass(frozen=True, eq=False)
class SlateInstance:
    """Enumerable slate problem on a common basis with linear rewards ``eta[x] . a``."""

    basis: SlateBasis
    p_x: np.ndarray
    mu: np.ndarray  # (C, s) logging probabilities over basis columns
    q: np.ndarray  # (C, l*m) target mean action vectors
    eta: np.ndarray  # (C, l*m)

    def states(self) -> list:
        return [prepare_state(self.basis, self.q[c], self.mu[c]) for c in range(len(self.p_x))]

    def outcome_probs(self) -> np.ndarray:
        return (self.p_x[:, None] * self.mu).ravel()

    def true_value(self) -> float:
        return float(np.sum(self.p_x * np.sum(self.eta * self.q, axis=1)))

    def expected_v_l1_sq(self) -> float:
        return float(sum(p * s.v_l1**2 for p, s in zip(self.p_x, self.states())))

    def logged(self, seq) -> LoggedSlateData:
        s = self.basis.size
        xs = np.array([i // s for i in seq])
        b = np.array([i % s for i in seq])
        r = np.einsum("ij,ji->i", self.eta[xs], self.basis.B[:, b])
        return LoggedSlateData(xs, np.zeros(len(seq)), b, r, self.mu[xs, b])
