"""Core value types and the reward / efficiency arithmetic.

Costs everywhere are dimensionless multiples of the Zero-Shot cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DomainError(ValueError):
    """An invariant of a domain value was violated at construction."""


@dataclass(frozen=True)
class Strategy:
    id: int
    name: str
    cost_proxy: float
    samples: int = 1
    description: str = ""

    def __post_init__(self):
        if self.id < 0:
            raise DomainError(f"strategy id must be >= 0, got {self.id}")
        if not (self.cost_proxy > 0 and math.isfinite(self.cost_proxy)):
            raise DomainError(f"{self.name}: cost_proxy must be positive, got {self.cost_proxy}")
        if self.samples < 1:
            raise DomainError(f"{self.name}: samples must be >= 1, got {self.samples}")
        if (self.name == "SC") != (self.samples == 5):
            raise DomainError(f"{self.name}: samples must be 5 exactly for SC (got {self.samples})")


@dataclass(frozen=True)
class StrategyLibrary:
    """Ordered action space. Strategy ids are positions in the list."""

    strategies: tuple[Strategy, ...]

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        ids = [s.id for s in self.strategies]
        if ids != list(range(len(ids))):
            raise DomainError(f"strategy ids must be 0..N-1 in order, got {ids}")
        names = [s.name for s in self.strategies]
        if len(set(names)) != len(names):
            raise DomainError(f"strategy names must be unique, got {names}")
        if not any(s.cost_proxy == 1.0 for s in self.strategies):
            raise DomainError("library needs a baseline strategy with cost_proxy 1.0")

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "StrategyLibrary":
        """Build from ``{name, cost_proxy, samples[, description]}`` records, ids by position."""
        out = []
        for i, rec in enumerate(records):
            out.append(
                Strategy(
                    id=i,
                    name=str(rec["name"]),
                    cost_proxy=float(rec["cost_proxy"]),
                    samples=int(rec.get("samples", 1)),
                    description=str(rec.get("description", "")),
                )
            )
        return cls(tuple(out))

    def to_records(self) -> list[dict]:
        return [
            {"name": s.name, "cost_proxy": s.cost_proxy, "samples": s.samples, "description": s.description}
            for s in self.strategies
        ]

    def __len__(self) -> int:
        return len(self.strategies)

    def __iter__(self):
        return iter(self.strategies)

    def __getitem__(self, i: int) -> Strategy:
        return self.strategies[i]

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.strategies]

    def index(self, name: str) -> int:
        for s in self.strategies:
            if s.name == name:
                return s.id
        raise KeyError(f"unknown strategy {name!r}; known: {self.names}")

    def cheapest(self) -> int:
        return min(self.strategies, key=lambda s: s.cost_proxy).id


# Prompt strategy action space with cost proxies, ZS = 1.0.
DEFAULT_LIBRARY = StrategyLibrary(
    (
        Strategy(0, "ZS", 1.0, 1, "Zero-Shot: direct answer generation"),
        Strategy(1, "FS", 1.5, 1, "Few-Shot: in-context examples"),
        Strategy(2, "CoT", 4.0, 1, "Chain-of-Thought: step-by-step reasoning"),
        Strategy(3, "GFP", 5.5, 1, "Gap-Filling Prompting: two-step generation with hints"),
        Strategy(4, "SC", 20.0, 5, "Self-Consistency: CoT with K=5 samples and majority vote"),
    )
)


@dataclass(frozen=True)
class RewardParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise DomainError(f"reward weights must be nonnegative, got alpha={self.alpha} beta={self.beta}")
        if not self.alpha + self.beta > 0:
            raise DomainError("at least one of alpha, beta must be positive")


@dataclass(frozen=True)
class QueryState:
    """One query: hidden difficulty plus the observable feature vector.

    ``latent_difficulty`` is None for queries from a live backend, where no
    ground-truth difficulty exists.
    """

    latent_difficulty: float | None
    features: np.ndarray = field(repr=False)
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise DomainError(f"features must be a vector, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise DomainError("features must be finite")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        d = self.latent_difficulty
        if d is not None and not (0.0 <= d <= 1.0):
            raise DomainError(f"latent_difficulty must lie in [0, 1], got {d}")

    def __eq__(self, other):
        if not isinstance(other, QueryState):
            return NotImplemented
        return (
            self.latent_difficulty == other.latent_difficulty
            and self.seed == other.seed
            and self.index == other.index
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True)
class Outcome:
    accuracy: int
    observed_cost: float

    def __post_init__(self):
        if self.accuracy not in (0, 1):
            raise DomainError(f"accuracy must be 0 or 1, got {self.accuracy}")
        if not (self.observed_cost > 0 and math.isfinite(self.observed_cost)):
            raise DomainError(f"observed_cost must be positive and finite, got {self.observed_cost}")


@dataclass(frozen=True)
class Transition:
    features: np.ndarray = field(repr=False)
    action: int
    reward: float
    old_prob: float

    def __post_init__(self):
        if not (0.0 < self.old_prob <= 1.0):
            raise DomainError(f"old_prob must lie in (0, 1], got {self.old_prob}")
        if not math.isfinite(self.reward):
            raise DomainError(f"reward must be finite, got {self.reward}")


def compute_reward(outcome: Outcome, params: RewardParams) -> float:
    """Composite reward: ``alpha * accuracy - beta * observed_cost``."""
    return params.alpha * outcome.accuracy - params.beta * outcome.observed_cost


def efficiency_gain(cost_method: float, cost_reference: float) -> float:
    """Fractional cost reduction relative to a reference (normally Fixed SC).

    Negative when the method costs more than the reference.
    """
    if not cost_reference > 0:
        raise DomainError(f"cost_reference must be positive, got {cost_reference}")
    return (cost_reference - cost_method) / cost_reference


def histogram(actions: Sequence[int] | np.ndarray, n_actions: int) -> list[int]:
    return np.bincount(np.asarray(actions, dtype=np.int64), minlength=n_actions).tolist()
