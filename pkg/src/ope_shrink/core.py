"""Core domain types: contexts, logged bandit data, policies, full-information data.

Everything is stored as dense numpy arrays.  Record-level types
(:class:`Context`, :class:`LoggedSample`) exist for readability and I/O; the
estimators operate on the batched :class:`LoggedData`.
"""
from __future__ import annotations

import csv
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import AbsoluteContinuityViolation, DataFormatError, EmptyDataset

PROB_ATOL = 1e-9

REWARD_MODES = ("deterministic", "stochastic")
# stochastic mode: the label action pays 1 w.p. 0.75, any other action pays 1 w.p. 0.25
STOCHASTIC_HIT = 0.75


ActionId = int


@dataclass(frozen=True)
class Context:
    id: int
    features: np.ndarray


@dataclass(frozen=True)
class LoggedSample:
    context: Context
    action: ActionId
    reward: float
    propensity: float

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward {self.reward} outside [0, 1]")
        if not 0.0 <= self.propensity <= 1.0:
            raise ValueError(f"propensity {self.propensity} outside [0, 1]")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LoggedData:
    """A batch of logged interactions ``(x_i, a_i, r_i, mu(a_i|x_i))``.

    ``logging_probs`` is the full logging distribution ``mu(.|x_i)`` for each
    sample.  It is optional: the value estimators only need the recorded
    propensity, but the pessimistic and optimistic bias estimates integrate
    over all actions and therefore require it.
    """

    context_ids: np.ndarray
    features: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray
    k: int
    logging_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.actions)
        ids = np.asarray(self.context_ids, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(n, -1)
        object.__setattr__(self, "context_ids", _frozen(ids))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "actions", _frozen(np.asarray(self.actions, dtype=np.int64)))
        object.__setattr__(self, "rewards", _frozen(np.asarray(self.rewards, dtype=np.float64)))
        object.__setattr__(self, "propensities", _frozen(np.asarray(self.propensities, dtype=np.float64)))
        if self.logging_probs is not None:
            object.__setattr__(self, "logging_probs", _frozen(np.asarray(self.logging_probs, dtype=np.float64)))
        for name in ("context_ids", "rewards", "propensities"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if self.features.shape[0] != n:
            raise ValueError("features row count does not match sample count")
        if n and (self.actions.min() < 0 or self.actions.max() >= self.k):
            raise ValueError(f"actions must lie in [0, {self.k})")
        if np.any((self.rewards < 0) | (self.rewards > 1)):
            raise ValueError("rewards must lie in [0, 1]")
        if np.any(self.propensities < 0) or np.any(self.propensities > 1):
            raise ValueError("propensities must lie in [0, 1]")
        if self.logging_probs is not None and self.logging_probs.shape != (n, self.k):
            raise ValueError("logging_probs must have shape (n, k)")

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, idx) -> "LoggedData":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        return LoggedData(
            context_ids=self.context_ids[idx],
            features=self.features[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            propensities=self.propensities[idx],
            k=self.k,
            logging_probs=None if self.logging_probs is None else self.logging_probs[idx],
        )

    def samples(self) -> Iterator[LoggedSample]:
        for i in range(len(self)):
            yield LoggedSample(
                Context(int(self.context_ids[i]), self.features[i]),
                int(self.actions[i]),
                float(self.rewards[i]),
                float(self.propensities[i]),
            )

    @classmethod
    def from_samples(cls, samples: Sequence[LoggedSample], k: int) -> "LoggedData":
        if not samples:
            raise EmptyDataset("no samples")
        return cls(
            context_ids=[s.context.id for s in samples],
            features=np.stack([np.asarray(s.context.features, dtype=float) for s in samples]),
            actions=[s.action for s in samples],
            rewards=[s.reward for s in samples],
            propensities=[s.propensity for s in samples],
            k=k,
        )


class Policy(ABC):
    """A conditional distribution over ``k`` actions given a context.

    Subclasses return exact probabilities; nothing is estimated by sampling.
    """

    kind: str = "abstract"
    k: int

    @abstractmethod
    def probs(self, features: np.ndarray, ids: np.ndarray) -> np.ndarray:
        """Action probabilities, shape ``(n, k)``, for contexts given row-wise."""

    def prob(self, context: Context, action: ActionId) -> float:
        row = self.probs(np.atleast_2d(context.features), np.array([context.id]))
        return float(row[0, action])

    def probs_for(self, data: "LoggedData | FullInfoDataset") -> np.ndarray:
        ids = data.context_ids if isinstance(data, LoggedData) else data.ids
        return self.probs(data.features, ids)

    @property
    def is_deterministic(self) -> bool:
        return False


class TabularPolicy(Policy):
    """Probabilities looked up by context id, or one row shared by all contexts."""

    kind = "tabular"

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if np.any(table < 0) or not np.allclose(table.sum(axis=-1), 1.0, atol=PROB_ATOL, rtol=0):
            raise ValueError("table rows must be probability vectors")
        self.table = _frozen(table)
        self.k = table.shape[-1]

    @classmethod
    def uniform(cls, k: int) -> "TabularPolicy":
        return cls(np.full(k, 1.0 / k))

    def probs(self, features, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if self.table.ndim == 1:
            return np.broadcast_to(self.table, (len(ids), self.k)).copy()
        return self.table[ids]

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(self.table.max(axis=-1) == 1.0))


@dataclass(frozen=True, eq=False)
class FullInfoDataset:
    """Multiclass data: contexts with their correct labels.

    ``ids`` are stable integer context identifiers; they survive subsetting so
    that per-context randomness keyed on the id is unaffected by splits.
    """

    features: np.ndarray
    labels: np.ndarray
    k: int
    ids: np.ndarray = field(default=None)
    eta: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] != len(labels):
            raise ValueError("features must be (N, d) with one label per row")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")
        ids = np.arange(len(labels)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "ids", _frozen(ids))
        if self.eta is not None:
            object.__setattr__(self, "eta", _frozen(np.asarray(self.eta, dtype=np.float64)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "FullInfoDataset":
        return FullInfoDataset(
            self.features[idx], self.labels[idx], self.k, self.ids[idx],
            None if self.eta is None else self.eta[idx],
        )

    def expected_rewards(self, reward_mode: str = "deterministic") -> np.ndarray:
        """Table of ``eta(x, a)`` for every row, shape ``(N, k)``."""
        if self.eta is not None:
            return np.array(self.eta)
        onehot = np.zeros((len(self), self.k))
        onehot[np.arange(len(self)), self.labels] = 1.0
        if reward_mode == "deterministic":
            return onehot
        if reward_mode == "stochastic":
            return STOCHASTIC_HIT * onehot + (1.0 - STOCHASTIC_HIT) * (1.0 - onehot)
        raise ValueError(f"unknown reward mode {reward_mode!r}")


def importance_weight(target: Policy, sample: LoggedSample) -> float:
    pi = target.prob(sample.context, sample.action)
    if sample.propensity <= 0.0:
        if pi > 0.0:
            raise AbsoluteContinuityViolation(
                f"context {sample.context.id}: target prob {pi} but logged propensity 0"
            )
        return 0.0
    return pi / sample.propensity


def importance_weights(target: Policy, data: LoggedData) -> np.ndarray:
    """Vectorized :func:`importance_weight` over a batch."""
    pi = target.probs_for(data)[np.arange(len(data)), data.actions]
    bad = (data.propensities <= 0) & (pi > 0)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise AbsoluteContinuityViolation(f"sample {i}: target prob {pi[i]} but logged propensity 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(data.propensities > 0, pi / np.where(data.propensities > 0, data.propensities, 1.0), 0.0)


def check_absolute_continuity(
    target: Policy, logging: Policy, features: np.ndarray, ids: np.ndarray
) -> list[tuple[int, int]]:
    """Every ``(context id, action)`` with ``pi > 0`` and ``mu == 0``; empty means valid."""
    if target.k != logging.k:
        raise ValueError("policies are defined on different action sets")
    pi = target.probs(features, ids)
    mu = logging.probs(features, ids)
    rows, cols = np.nonzero((pi > 0) & (mu == 0))
    return [(int(np.asarray(ids)[r]), int(c)) for r, c in zip(rows, cols)]


def true_policy_value(target: Policy, data: FullInfoDataset, reward_mode: str = "deterministic") -> float:
    eta = data.expected_rewards(reward_mode)
    return float(np.mean(np.sum(target.probs_for(data) * eta, axis=1)))


# ---------------------------------------------------------------- file I/O


def load_multiclass_csv(csv_path, sidecar_path=None) -> FullInfoDataset:
    """Read ``label, f0, f1, ...`` plus a ``{"k": .., "feature_dim": ..}`` sidecar.

    The sidecar defaults to the CSV path with a ``.json`` suffix.
    """
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    try:
        meta = json.loads(sidecar_path.read_text())
        k, dim = int(meta["k"]), int(meta["feature_dim"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"bad sidecar {sidecar_path}: {exc}") from exc
    try:
        with csv_path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader if row]
    except (OSError, StopIteration) as exc:
        raise DataFormatError(f"cannot read {csv_path}: {exc}") from exc
    expected = ["label"] + [f"f{j}" for j in range(dim)]
    if [h.strip() for h in header] != expected:
        raise DataFormatError(f"{csv_path}: header must be {','.join(expected)}")
    try:
        arr = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{csv_path}: non-numeric entry ({exc})") from exc
    if arr.size == 0:
        raise DataFormatError(f"{csv_path}: no rows")
    labels = arr[:, 0]
    if np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= k:
        raise DataFormatError(f"{csv_path}: labels must be integers in [0, {k})")
    try:
        return FullInfoDataset(arr[:, 1:], labels.astype(np.int64), k)
    except ValueError as exc:
        raise DataFormatError(f"{csv_path}: {exc}") from exc


def write_multiclass_csv(data: FullInfoDataset, csv_path) -> None:
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(data.feature_dim)])
        for y, x in zip(data.labels, data.features):
            w.writerow([int(y)] + [repr(float(v)) for v in x])
    csv_path.with_suffix(".json").write_text(json.dumps({"k": data.k, "feature_dim": data.feature_dim}))


LOGGED_HEADER = ["context_id", "action", "reward", "propensity"]


def write_logged_csv(data: LoggedData, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOGGED_HEADER)
        for cid, a, r, p in zip(data.context_ids, data.actions, data.rewards, data.propensities):
            w.writerow([int(cid), int(a), repr(float(r)), repr(float(p))])


def read_logged_csv(path, dataset: FullInfoDataset) -> LoggedData:
    """Read a logged-bandit CSV, joining features from ``dataset`` by context id."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            rows = [row for row in reader if row]
    except (OSError, StopIteration) as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if header != LOGGED_HEADER:
        raise DataFormatError(f"{path}: header must be {','.join(LOGGED_HEADER)}")
    if not rows:
        raise EmptyDataset(f"{path}: no rows")
    pos = {int(i): j for j, i in enumerate(dataset.ids)}
    try:
        cids = [int(r[0]) for r in rows]
        feats = dataset.features[[pos[c] for c in cids]]
        return LoggedData(
            context_ids=cids,
            features=feats,
            actions=[int(r[1]) for r in rows],
            rewards=[float(r[2]) for r in rows],
            propensities=[float(r[3]) for r in rows],
            k=dataset.k,
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: unknown context id {exc}") from exc
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
