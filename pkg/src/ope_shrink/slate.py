"""Combinatorial (slate) actions and the pseudo-inverse estimators.

A slate is an ordered list of ``l`` distinct items out of ``m``, encoded as an
``l``-hot vector of length ``l*m`` (block ``j`` holds a one-hot of the item
in position ``j``).  For a logging policy supported on a linearly independent
basis ``B`` (columns are slates) with probabilities ``mu``, the pseudo-inverse
weight of basis column ``i`` is ``v_i / mu_i`` where ``B v = q`` and ``q`` is
the target's mean action vector.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DataFormatError,
    DuplicateItem,
    EmptyDataset,
    IndexOutOfRange,
    RankDeficient,
    SpanViolation,
    ZeroPropensity,
)
from .estimators import EstimateBreakdown, shrink_optimistic
from .rng import STREAM_EPSILON, uniform_from_keys

SPAN_TOL = 1e-6
RCOND_MIN = 1e-10
EPSILON_SET = (2**-1, 2**-2, 2**-3, 2**-4, 2**-5)


def lhot_encode(items: Sequence[int], l: int, m: int) -> np.ndarray:
    items = [int(i) for i in items]
    if len(items) != l:
        raise ValueError(f"expected {l} items, got {len(items)}")
    if any(i < 0 or i >= m for i in items):
        raise IndexOutOfRange(f"items must lie in [0, {m})")
    if len(set(items)) != l:
        raise DuplicateItem(f"items {items} are not distinct")
    out = np.zeros(l * m)
    out[np.arange(l) * m + np.asarray(items)] = 1.0
    return out


@dataclass(frozen=True)
class SlateAction:
    items: tuple
    m: int

    @property
    def l(self) -> int:
        return len(self.items)

    @property
    def vector(self) -> np.ndarray:
        return lhot_encode(self.items, self.l, self.m)


def _gains(rel) -> np.ndarray:
    return np.power(2.0, np.asarray(rel, dtype=np.float64)) - 1.0


def _discounts(l: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, l + 2))


def dcg(rel: Sequence[float], items: Sequence[int]) -> float:
    return float(np.sum(_gains(rel)[list(items)] * _discounts(len(items))))


def dcg_star(rel: Sequence[float], l: int) -> float:
    """Best DCG over lists of length ``l``: the ``l`` largest gains in descending order."""
    top = np.sort(_gains(rel))[::-1][:l]
    return float(np.sum(top * _discounts(len(top))))


def ndcg(rel: Sequence[float], items: Sequence[int]) -> float:
    """``DCG / DCG*`` in [0, 1]; 0 when every relevance is 0."""
    best = dcg_star(rel, len(items))
    return 0.0 if best == 0 else dcg(rel, items) / best


def ndcg_vector(rel: Sequence[float], l: int) -> np.ndarray:
    """Vector ``eta`` with ``ndcg(rel, a) == eta . lhot(a)`` for every slate ``a``."""
    rel = np.asarray(rel, dtype=np.float64)
    best = dcg_star(rel, l)
    if best == 0:
        return np.zeros(l * len(rel))
    return (np.outer(_discounts(l), _gains(rel)) / best).ravel()


def greedy_basis_actions(l: int, m: int) -> list:
    """Basis slates for lists of ``l`` out of ``m`` items, greedy list first.

    Positions and items are 0-indexed with greedy list ``(0, 1, ..., l-1)``;
    the remaining lists swap, replace or rotate items of the greedy list
    through the top position.  Produces ``1 + l(m-1)`` lists when ``m > l``.
    """
    if not 1 <= l <= m:
        raise ValueError(f"need 1 <= l <= m, got l={l}, m={m}")
    g = list(range(l))
    out = [tuple(g)]

    def put(**pos):
        a = list(g)
        for p, item in pos.items():
            a[int(p[1:])] = item
        out.append(tuple(a))

    for i in range(1, l):
        put(**{"p0": i, f"p{i}": 0})
    for j in range(l, m):
        put(p0=j)
    for i in range(1, l):
        for i2 in range(1, l):
            if i2 != i:
                put(**{"p0": i, f"p{i}": i2, f"p{i2}": 0})
        for j in range(l, m):
            put(**{"p0": i, f"p{i}": j})
    for i in range(1, l):
        put(**{"p0": l, f"p{i}": 0})
    return out


@dataclass(frozen=True, eq=False)
class SlateBasis:
    """Linearly independent slates ``B`` (``l*m x s``), Gram matrix and its factor."""

    l: int
    m: int
    actions: tuple
    B: np.ndarray
    K: np.ndarray
    _factor: tuple

    @property
    def size(self) -> int:
        return len(self.actions)

    def solve_v(self, q: np.ndarray) -> tuple:
        """Coefficients ``v`` with ``B v = q`` and the residual ``||B v - q||_inf``."""
        v = scipy.linalg.cho_solve(self._factor, self.B.T @ q)
        residual = float(np.max(np.abs(self.B @ v - q)))
        return v, residual

    def column_of(self, items: Sequence[int]) -> int:
        return self.actions.index(tuple(int(i) for i in items))


def basis_from_actions(actions: Sequence[Sequence[int]], l: int, m: int) -> SlateBasis:
    """Wrap a list of slates as a basis, verifying linear independence."""
    actions = tuple(tuple(int(i) for i in a) for a in actions)
    for a in actions:
        if any(i >= m or i < 0 for i in a):
            raise RankDeficient(f"slate {a} uses items outside [0, {m})")
    B = np.stack([lhot_encode(a, l, m) for a in actions], axis=1)
    if np.linalg.matrix_rank(B) != len(actions):
        raise RankDeficient(f"{len(actions)} slates are not linearly independent")
    K = B.T @ B
    if 1.0 / np.linalg.cond(K) < RCOND_MIN:
        raise RankDeficient("Gram matrix is ill-conditioned")
    return SlateBasis(l, m, actions, B, K, scipy.linalg.cho_factor(K))


def build_basis(l: int, m: int) -> SlateBasis:
    return basis_from_actions(greedy_basis_actions(l, m), l, m)


def solve_v(basis: SlateBasis, q: np.ndarray) -> tuple:
    v, residual = basis.solve_v(np.asarray(q, dtype=np.float64))
    if residual > SPAN_TOL:
        raise SpanViolation(f"target mean action is outside the logged span (residual {residual:.3g})")
    return v, residual


def compute_q(actions: Sequence[Sequence[int]], probs: Sequence[float], l: int, m: int) -> np.ndarray:
    """Mean ``l``-hot vector of a distribution over slates."""
    probs = np.asarray(probs, dtype=np.float64)
    return sum(p * lhot_encode(a, l, m) for a, p in zip(actions, probs) if p != 0) + np.zeros(l * m)


@dataclass(frozen=True, eq=False)
class SlateContextState:
    q: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    v_l1: float
    residual: float

    @property
    def weights(self) -> np.ndarray:
        """Pseudo-inverse weight of every basis column."""
        if np.any(self.mu <= 0):
            raise ZeroPropensity("basis column with zero logging probability")
        return self.v / self.mu


def prepare_state(basis: SlateBasis, q: np.ndarray, mu: np.ndarray) -> SlateContextState:
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu < 0) or not math.isclose(mu.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("mu must be a probability vector over the basis")
    v, res = solve_v(basis, q)
    return SlateContextState(np.asarray(q, dtype=np.float64), v, mu, float(np.abs(v).sum()), res)


def pi_weight(state: SlateContextState, i: int) -> float:
    if state.mu[i] <= 0:
        raise ZeroPropensity(f"basis column {i} has zero logging probability")
    return float(state.v[i] / state.mu[i])


def pseudo_inverse_weight_vector(basis: SlateBasis, mu: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``Gamma^+ q`` with ``Gamma^+ = B K^-1 D_mu^-1 K^-1 B^T`` (length ``l*m``)."""
    Kinv = np.linalg.inv(basis.K)
    gamma_pinv = basis.B @ Kinv @ np.diag(1.0 / np.asarray(mu)) @ Kinv @ basis.B.T
    return gamma_pinv @ q


@dataclass(frozen=True, eq=False)
class LoggedSlateData:
    """Logged slates: context id, epsilon, basis column, reward, propensity."""

    context_ids: np.ndarray
    epsilons: np.ndarray
    basis_index: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray

    def __post_init__(self):
        for name, dt in (("context_ids", np.int64), ("epsilons", np.float64), ("basis_index", np.int64),
                         ("rewards", np.float64), ("propensities", np.float64)):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=dt))
        if np.any(self.propensities <= 0):
            raise ZeroPropensity("logged propensities must be positive")

    def __len__(self):
        return len(self.rewards)

    def __getitem__(self, idx) -> "LoggedSlateData":
        return LoggedSlateData(self.context_ids[idx], self.epsilons[idx], self.basis_index[idx],
                               self.rewards[idx], self.propensities[idx])


class SlateInputs:
    """Per-sample pieces of the DR-PI family.

    ``w`` is ``v[b_i]/mu[b_i]``, ``dm_terms`` is ``eta_hat_i . q_i`` and
    ``residuals`` is ``r_i - eta_hat_i . a_i``.
    """

    def __init__(self, dm_terms, w, residuals):
        self.dm_terms = np.asarray(dm_terms, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        self.residuals = np.asarray(residuals, dtype=np.float64)
        if len(self.w) == 0:
            raise EmptyDataset("no slate samples")

    @classmethod
    def from_states(cls, samples: LoggedSlateData, basis: SlateBasis, states: Sequence[SlateContextState],
                    eta_hat: np.ndarray) -> "SlateInputs":
        """``states[c]`` and ``eta_hat[c]`` belong to context id ``c``."""
        ids = samples.context_ids
        b = samples.basis_index
        eta = np.asarray(eta_hat)[ids]
        q = np.stack([states[c].q for c in ids])
        w = np.array([states[c].v[j] / states[c].mu[j] for c, j in zip(ids, b)])
        eta_a = np.einsum("ij,ji->i", eta, basis.B[:, b])
        return cls(np.sum(eta * q, axis=1), w, samples.rewards - eta_a)

    def terms(self, lams) -> np.ndarray:
        lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
        w_hat = shrink_optimistic(self.w[None, :], lams[:, None])
        return self.dm_terms[None, :] + w_hat * self.residuals[None, :]

    def direct_bias(self, lams) -> np.ndarray:
        lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
        w_hat = shrink_optimistic(self.w[None, :], lams[:, None])
        return np.abs(np.mean((w_hat - self.w[None, :]) * self.residuals[None, :], axis=1))


def drs_pi_from_inputs(inp: SlateInputs, lam: float) -> EstimateBreakdown:
    terms = inp.terms([lam])[0]
    corr = terms - inp.dm_terms
    return EstimateBreakdown(float(np.mean(terms)), terms, float(np.mean(inp.dm_terms)), float(np.mean(corr)))


def drs_pi_estimate(samples: LoggedSlateData, basis: SlateBasis, states: Sequence[SlateContextState],
                    eta_hat: np.ndarray, lam: float = math.inf) -> EstimateBreakdown:
    """DRos-PI: ``Z_i = eta_i.q_i + [lam w_i/(lam + w_i^2)] (r_i - eta_i.a_i)``.

    ``lam = inf`` is DR-PI and ``lam = 0`` the direct term alone.
    """
    return drs_pi_from_inputs(SlateInputs.from_states(samples, basis, states, eta_hat), lam)


class EpsilonGreedySlateLogger:
    """Mass ``1 - eps`` on the greedy column 0 and ``eps/(s-1)`` on every other column.

    ``eps`` is drawn uniformly from ``epsilon_set`` per key (context id or
    sample index) from ``seed``.
    """

    def __init__(self, basis_size: int, epsilon_set: Sequence[float] = EPSILON_SET, seed: int = 0):
        if basis_size < 1:
            raise ValueError("basis must be nonempty")
        self.s = basis_size
        self.epsilon_set = np.asarray(epsilon_set, dtype=np.float64)
        self.seed = seed

    def epsilon(self, keys) -> np.ndarray:
        u = uniform_from_keys(self.seed, np.asarray(keys, dtype=np.int64), STREAM_EPSILON)
        return self.epsilon_set[np.minimum((u * len(self.epsilon_set)).astype(np.int64), len(self.epsilon_set) - 1)]

    def probs_for_epsilon(self, eps) -> np.ndarray:
        eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
        if self.s == 1:
            return np.ones((len(eps), 1))
        out = np.repeat((eps / (self.s - 1))[:, None], self.s, axis=1)
        out[:, 0] = 1.0 - eps
        return out

    def probs(self, keys) -> np.ndarray:
        return self.probs_for_epsilon(self.epsilon(keys))


def epsilon_greedy_slate_logger(basis: SlateBasis, epsilon_set=EPSILON_SET, seed: int = 0) -> EpsilonGreedySlateLogger:
    return EpsilonGreedySlateLogger(basis.size, epsilon_set, seed)


# ---------------------------------------------------------------- file I/O

SLATE_LOG_HEADER = ["query_id", "epsilon", "basis_index", "reward", "propensity"]


@dataclass(frozen=True, eq=False)
class Query:
    query_id: int
    doc_ids: np.ndarray
    relevance: np.ndarray
    features: np.ndarray


def read_relevance_csv(path) -> list:
    """Read ``query_id, doc_id, relevance, f0, ...`` into queries ordered by first appearance."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            rows = [r for r in reader if r]
    except (OSError, StopIteration) as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if header[:3] != ["query_id", "doc_id", "relevance"] or header[3:] != [f"f{j}" for j in range(len(header) - 3)]:
        raise DataFormatError(f"{path}: header must be query_id,doc_id,relevance,f0,f1,...")
    if not rows:
        raise DataFormatError(f"{path}: no rows")
    grouped: dict = {}
    try:
        for r in rows:
            grouped.setdefault(int(r[0]), []).append((int(r[1]), float(r[2]), [float(x) for x in r[3:]]))
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    out = []
    for qid, docs in grouped.items():
        out.append(Query(qid, np.array([d[0] for d in docs]), np.array([d[1] for d in docs]),
                         np.array([d[2] for d in docs])))
    return out


def write_relevance_csv(queries: Sequence[Query], path) -> None:
    p = queries[0].features.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "doc_id", "relevance"] + [f"f{j}" for j in range(p)])
        for q in queries:
            for d, r, f in zip(q.doc_ids, q.relevance, q.features):
                w.writerow([q.query_id, int(d), repr(float(r))] + [repr(float(x)) for x in f])


def write_slate_log_csv(data: LoggedSlateData, path, query_ids: Optional[np.ndarray] = None) -> None:
    qids = data.context_ids if query_ids is None else np.asarray(query_ids)[data.context_ids]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SLATE_LOG_HEADER)
        for q, e, b, r, p in zip(qids, data.epsilons, data.basis_index, data.rewards, data.propensities):
            w.writerow([int(q), repr(float(e)), int(b), repr(float(r)), repr(float(p))])


def read_slate_log_csv(path, basis_size: int) -> LoggedSlateData:
    """Read a slate log; rows whose basis index falls outside the basis are rejected."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            rows = [r for r in reader if r]
    except (OSError, StopIteration) as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if header != SLATE_LOG_HEADER:
        raise DataFormatError(f"{path}: header must be {','.join(SLATE_LOG_HEADER)}")
    try:
        cols = list(zip(*rows))
        data = LoggedSlateData(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=float),
                               np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=float),
                               np.array(cols[4], dtype=float))
    except (ValueError, IndexError, ZeroPropensity) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if np.any(data.basis_index < 0) or np.any(data.basis_index >= basis_size):
        raise DataFormatError(f"{path}: logged action outside the logging basis")
    return data
