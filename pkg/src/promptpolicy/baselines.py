"""Non-learned policies: fixed strategies and the complexity-threshold heuristic.

A policy here is any callable ``policy(features, indices=None) -> actions``
taking a (B, D) feature batch; ``indices`` are the query indices, used only
by policies that randomize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import DEFAULT_LIBRARY, DomainError, StrategyLibrary
from .synthenv import EnvConfig, TUNING_STREAM, generate_query


@dataclass(frozen=True)
class FixedPolicy:
    action: int
    label: str = ""

    def __call__(self, features, indices=None) -> np.ndarray:
        return np.full(len(np.atleast_2d(features)), self.action, dtype=np.int64)


def fixed_policy(strategy: int | str, library: StrategyLibrary = DEFAULT_LIBRARY) -> FixedPolicy:
    """Constant policy selecting one strategy, given by id or name."""
    if isinstance(strategy, str):
        sid = library.index(strategy)
    else:
        sid = int(strategy)
        if not (0 <= sid < len(library)):
            raise DomainError(f"unknown strategy id {strategy} (library has {len(library)})")
    return FixedPolicy(sid, f"Fixed {library[sid].name}")


@dataclass(frozen=True)
class HeuristicConfig:
    threshold: float
    feature_index: int = 0
    low_action: int = 0
    high_action: int = 2

    def __post_init__(self):
        if self.feature_index < 0:
            raise DomainError("feature_index must be >= 0")
        if self.low_action == self.high_action:
            raise DomainError("low_action and high_action must differ")

    def validate(self, feature_dim: int, n_actions: int) -> None:
        if self.feature_index >= feature_dim:
            raise DomainError(f"feature_index {self.feature_index} out of range for D={feature_dim}")
        for a in (self.low_action, self.high_action):
            if not (0 <= a < n_actions):
                raise DomainError(f"unknown strategy id {a}")


@dataclass(frozen=True)
class HeuristicPolicy:
    config: HeuristicConfig
    label: str = "Heuristic Adaptive"

    def __call__(self, features, indices=None) -> np.ndarray:
        proxy = np.atleast_2d(features)[:, self.config.feature_index]
        return np.where(proxy > self.config.threshold, self.config.high_action, self.config.low_action).astype(np.int64)


def heuristic_policy(config: HeuristicConfig, env: EnvConfig | None = None) -> HeuristicPolicy:
    """Pick ``high_action`` when the proxy feature exceeds the threshold, else ``low_action``."""
    if env is not None:
        config.validate(env.feature_dim, env.n_actions)
    return HeuristicPolicy(config)


def tune_threshold(
    env: EnvConfig,
    config: HeuristicConfig,
    target_high_fraction: float,
    n_samples: int = 10_000,
) -> float:
    """Threshold sending ``target_high_fraction`` of a tuning sample to ``high_action``.

    This is the empirical (1 - fraction) quantile of the proxy feature, taken
    as an observed value so that tiny fractions give a threshold at or above
    every sampled proxy.
    """
    if not (0.0 < target_high_fraction < 1.0):
        raise ValueError(f"target_high_fraction must lie in (0, 1), got {target_high_fraction}")
    config.validate(env.feature_dim, env.n_actions)
    proxy = np.array(
        [generate_query(env, i, TUNING_STREAM).features[config.feature_index] for i in range(n_samples)]
    )
    return float(np.quantile(proxy, 1.0 - target_high_fraction, method="higher"))
