# engine/defenses.py
"""
Black-box query oracles. Every oracle answers a batch of images with a batch
of probability vectors (float64, rows sum to 1) and counts one query per image.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Literal, Optional

import numpy as np

from engine.errors import BudgetExhausted, ConfigError, InputDomainError
from engine.model import ClassifierModel, Dataset, forward_features, forward_logits
from engine.numerics import RngStream, batch_chunks, softmax
from engine.unig import UniGConfig, cascade_features, unig_forward_features

log = logging.getLogger("defense")

DefenseKind = Literal["vanilla", "rnd", "unig"]


@dataclass(frozen=True)
class DefenseSpec:
    kind: DefenseKind = "vanilla"
    rnd_sigma: float = 0.02
    unig: UniGConfig = field(default_factory=UniGConfig)
    single_sample: bool = False

    def params(self) -> Dict[str, Any]:
        if self.kind == "rnd":
            return {"sigma": self.rnd_sigma}
        if self.kind == "unig":
            out = {"delta": self.unig.delta, "p": self.unig.p, "alpha": self.unig.alpha}
            if self.unig.frozen_p:
                out["frozen_p"] = True
            if self.single_sample:
                out["cascade_k"] = self.unig.cascade_k
            return out
        return {}

    def params_str(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.params().items())


# ============================================================
# Oracles
# ============================================================

class QueryOracle:
    """
    Vanilla oracle and base class. `budget` caps the total number of image
    queries; over-budget calls are still answered and counted, and raise
    BudgetExhausted only when `strict` is set.
    """
    kind: DefenseKind = "vanilla"

    def __init__(
        self,
        model: ClassifierModel,
        seed: int = 0,
        budget: Optional[int] = None,
        strict: bool = False,
    ):
        self.model = model
        self.seed = seed
        self.rng = RngStream(seed)
        self.budget = budget
        self.strict = strict
        self.query_count = 0
        self.calls = 0
        self.over_budget_calls = 0

    @property
    def exhausted(self) -> bool:
        return self.budget is not None and self.query_count >= self.budget

    def query(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise InputDomainError(f"query expects a batch (b, c, h, w), got {x.shape}")
        b = x.shape[0]
        over = self.budget is not None and self.query_count + b > self.budget
        self.query_count += b
        self.calls += 1
        if over:
            self.over_budget_calls += 1
            if self.strict:
                raise BudgetExhausted(self.query_count, self.budget)
        return self._respond(x)

    def _respond(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.defended_logits(x))

    def defended_logits(self, x: np.ndarray) -> np.ndarray:
        """Logits the defense would produce for x; not counted as queries."""
        return forward_logits(self.model, x)


class RandomNoiseOracle(QueryOracle):
    kind = "rnd"

    def __init__(self, model: ClassifierModel, sigma: float = 0.02, **kw):
        super().__init__(model, **kw)
        if sigma < 0:
            raise InputDomainError(f"sigma must be >= 0 (got {sigma})")
        self.sigma = sigma

    def defended_logits(self, x: np.ndarray) -> np.ndarray:
        noisy = x + self.sigma * self.rng.normal(0.0, 1.0, x.shape)
        return forward_logits(self.model, np.clip(noisy, 0.0, 1.0))


class UniGOracle(QueryOracle):
    kind = "unig"

    def __init__(
        self,
        model: ClassifierModel,
        cfg: UniGConfig,
        single_sample: bool = False,
        reservoir: Optional[Dataset] = None,
        **kw,
    ):
        super().__init__(model, **kw)
        self.cfg = cfg
        self.single_sample = single_sample
        self.reservoir = reservoir
        self._reservoir_f: Optional[np.ndarray] = None
        self._passes = 0
        if single_sample and (reservoir is None or len(reservoir) == 0):
            raise ConfigError("single-sample UniG needs a non-empty reservoir")

    def _next_rng(self) -> RngStream:
        # fresh A per forward call
        self._passes += 1
        return self.rng.spawn(self._passes)

    def defended_logits(self, x: np.ndarray) -> np.ndarray:
        f = forward_features(self.model, x)
        if not self.single_sample:
            _, state = unig_forward_features(self.model, f, self.cfg, self._next_rng())
            return state.logits

        if self._reservoir_f is None:
            self._reservoir_f = forward_features(self.model, self.reservoir.images)
        rows = []
        for i in range(f.shape[0]):
            _, state = cascade_features(self.model, f[i], self._reservoir_f,
                                        self.cfg, self._next_rng())
            rows.append(state.logits[0])
        return np.stack(rows)


def make_oracle(
    spec: DefenseSpec,
    model: ClassifierModel,
    seed: int = 0,
    budget: Optional[int] = None,
    strict: bool = False,
    reservoir: Optional[Dataset] = None,
) -> QueryOracle:
    if spec.kind == "vanilla":
        return QueryOracle(model, seed=seed, budget=budget, strict=strict)
    if spec.kind == "rnd":
        return RandomNoiseOracle(model, spec.rnd_sigma, seed=seed, budget=budget, strict=strict)
    if spec.kind == "unig":
        return UniGOracle(model, spec.unig, spec.single_sample, reservoir,
                          seed=seed, budget=budget, strict=strict)
    raise ConfigError(f"unknown defense kind: {spec.kind}")


# ============================================================
# Output distortion metric
# ============================================================

def logit_diff(
    defense: DefenseSpec,
    model: ClassifierModel,
    dataset: Dataset,
    seed: int = 0,
    batch_size: int = 128,
    reservoir: Optional[Dataset] = None,
) -> float:
    """Mean L2 distance between defended and vanilla logits on clean images."""
    n = len(dataset)
    if n == 0:
        raise InputDomainError("logit_diff needs a non-empty dataset")
    if defense.kind == "vanilla":
        return 0.0
    oracle = make_oracle(defense, model, seed=seed, reservoir=reservoir)
    total = 0.0
    for rows in batch_chunks(n, batch_size):
        x = dataset.images[rows]
        diff = oracle.defended_logits(x) - forward_logits(model, x)
        total += float(np.sum(np.linalg.norm(diff, axis=1)))
    return total / n
