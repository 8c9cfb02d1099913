"""Run configurations for the command line, validated with pydantic.

Every config is a JSON object with ``schema_version`` and ``command``;
unknown keys are rejected so that typos fail loudly.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .learning import TRAINING_LAMBDAS
from .simulation import DEFAULT_ROSTER, LOGGING_POLICIES, parse_roster
from .slate_experiment import SLATE_PREDICTORS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticMulticlass(_Strict):
    n: int = Field(4000, ge=8)
    k: int = Field(4, ge=2)
    d: int = Field(8, ge=2)
    separation: float = 1.0
    seed: int = 0


class DatasetRef(_Strict):
    id: str
    path: Optional[str] = None
    sidecar: Optional[str] = None
    synthetic: Optional[SyntheticMulticlass] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'path' and 'synthetic' must be given")
        if self.path is not None and not Path(self.path).is_file():
            raise ValueError(f"path: file {self.path!r} does not exist")
        return self


class PolicyModel(_Strict):
    base: Literal["pi1", "pi2", "uniform"]
    alpha: float = 1.0
    beta: float = 0.0


class _Common(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: Optional[int] = Field(None, ge=0, lt=2**64)
    output_dir: Optional[str] = None
    threads: int = Field(1, ge=1)


class EvaluateConfig(_Common):
    command: Literal["evaluate"]
    datasets: List[DatasetRef] = Field(min_length=1)
    logging_policies: List[PolicyModel] = Field(
        default_factory=lambda: [PolicyModel(base=p.base, alpha=p.alpha, beta=p.beta) for p in LOGGING_POLICIES])
    target_policy: PolicyModel = PolicyModel(base="pi1", alpha=0.9, beta=0.0)
    reward_modes: List[Literal["deterministic", "stochastic"]] = ["deterministic"]
    n_values: List[int] = Field([2000], min_length=1)
    replicates: int = Field(500, ge=1)
    estimators: List[str] = Field(default_factory=lambda: list(DEFAULT_ROSTER), min_length=1)
    selection_mode: Literal["DRs-direct", "DRs-upper", "switch", "direct-only"] = "DRs-direct"
    truth_on: Literal["holdout", "pool"] = "holdout"
    holdout_frac: float = Field(0.25, gt=0, lt=1)
    reg: float = Field(1.0, gt=0)

    @field_validator("estimators")
    @classmethod
    def _roster(cls, v):
        parse_roster(v)
        return v

    @field_validator("n_values")
    @classmethod
    def _ns(cls, v):
        if any(n < 4 for n in v):
            raise ValueError("every n must be >= 4 (half trains the reward model, half evaluates)")
        return v


class SyntheticQueries(_Strict):
    n_queries: int = Field(300, ge=4)
    docs_per_query: int = Field(30, ge=1)
    n_features: int = Field(10, ge=2)
    seed: int = 0


class SlateConfig(_Common):
    command: Literal["slate"]
    relevance_csv: Optional[str] = None
    synthetic: Optional[SyntheticQueries] = None
    l: int = Field(5, ge=1)
    m: int = Field(20, ge=1)
    reward_modes: List[Literal["deterministic", "stochastic"]] = ["deterministic", "stochastic"]
    predictors: List[Literal["ridge_all", "ridge_5"]] = Field(default_factory=lambda: list(SLATE_PREDICTORS))
    n_values: List[int] = Field([500, 2000], min_length=1)
    replicates: int = Field(20, ge=1)
    train_frac: float = Field(0.1, gt=0, lt=1)
    reg: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if (self.relevance_csv is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'relevance_csv' and 'synthetic' must be given")
        if self.relevance_csv is not None and not Path(self.relevance_csv).is_file():
            raise ValueError(f"relevance_csv: file {self.relevance_csv!r} does not exist")
        if self.l > self.m:
            raise ValueError(f"l: slate length {self.l} exceeds the number of items m={self.m}")
        if any(n < 4 for n in self.n_values):
            raise ValueError("n_values: every n must be >= 4")
        return self


class LearnConfig(_Common):
    command: Literal["learn"]
    dataset: DatasetRef
    gammas: List[float] = Field([0.001, 0.01, 0.1])
    lams: List[Union[float, Literal["inf"]]] = Field(default_factory=lambda: ["inf" if math.isinf(x) else x
                                                                             for x in TRAINING_LAMBDAS])
    reward_mode: Literal["deterministic", "stochastic"] = "deterministic"
    logging_alpha: float = Field(0.9, ge=0, le=1)
    step: float = Field(0.1, gt=0)
    max_iter: int = Field(200, ge=0)
    reg: float = Field(1.0, gt=0)

    @field_validator("gammas")
    @classmethod
    def _gammas(cls, v):
        if not v:
            raise ValueError("at least one gamma is required (no candidates to train)")
        if any(not g > 0 for g in v):
            raise ValueError("every gamma must be positive")
        return v

    @field_validator("lams")
    @classmethod
    def _lams(cls, v):
        if not v:
            raise ValueError("at least one lambda is required (no candidates to train)")
        out = [math.inf if x == "inf" else float(x) for x in v]
        bad = [x for x in out if x not in TRAINING_LAMBDAS]
        if bad:
            raise ValueError(f"values {bad} are not in the training grid {TRAINING_LAMBDAS}")
        return v

    @property
    def lam_values(self) -> tuple:
        return tuple(math.inf if x == "inf" else float(x) for x in self.lams)


_MODELS = {"evaluate": EvaluateConfig, "slate": SlateConfig, "learn": LearnConfig}


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def load_config(path, command: str):
    """Parse and validate a config file for ``command``; raises :class:`ConfigError`."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    raw.setdefault("command", command)
    if raw["command"] != command:
        raise ConfigError(f"command: config is for {raw['command']!r}, not {command!r}")
    try:
        return _MODELS[command].model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

