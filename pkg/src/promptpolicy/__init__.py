"""Learned prompt-strategy selection under a cost-penalized reward."""

__version__ = "0.1.0"

from .domain import (
    DEFAULT_LIBRARY,
    Outcome,
    QueryState,
    RewardParams,
    Strategy,
    StrategyLibrary,
    Transition,
    compute_reward,
    efficiency_gain,
)

__all__ = [
    "DEFAULT_LIBRARY",
    "Outcome",
    "QueryState",
    "RewardParams",
    "Strategy",
    "StrategyLibrary",
    "Transition",
    "compute_reward",
    "efficiency_gain",
]
