"""PPO-Clip trainer for the single-step strategy-selection MDP.

Each episode collects one batch of fresh queries under a frozen snapshot of
the policy, computes advantages ``R - V(s)`` once, then runs ``k_epochs``
passes of shuffled minibatch updates. There is no discounting and no
bootstrapping: every trajectory is one action long.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .domain import Outcome, RewardParams, Transition, compute_reward, histogram
from .policynet import (
    DivergenceError,
    OptimizerState,
    PolicyValueNet,
    apply_update,
    backward,
    entropy,
    forward,
    forward_logits,
    init,
    log_softmax,
    sample_action,
    softmax,
)

log = logging.getLogger(__name__)

RATIO_SANE_RANGE = (0.2, 5.0)


@dataclass(frozen=True)
class PPOConfig:
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.01
    k_epochs: int = 4
    batch_size: int = 256
    episodes: int = 500
    reward_params: RewardParams = RewardParams(10.0, 1.0)
    advantage_normalization: bool = True
    minibatch_size: int = 64
    seed: int = 0
    learning_rate: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    value_coef: float = 0.5
    max_grad_norm: float | None = None
    hidden: tuple[int, ...] = (64, 64)
    shared_trunk: bool = True

    def __post_init__(self):
        if not (0.0 < self.clip_epsilon < 1.0):
            raise ValueError(f"clip_epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be >= 0")
        if self.k_epochs < 1:
            raise ValueError("k_epochs must be >= 1")
        if self.batch_size < 1 or self.minibatch_size < 1:
            raise ValueError("batch_size and minibatch_size must be positive")
        if self.minibatch_size > self.batch_size:
            raise ValueError(f"minibatch_size {self.minibatch_size} exceeds batch_size {self.batch_size}")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PPOConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ppo fields {sorted(unknown)}")
        rp = data.pop("reward_params", None)
        if isinstance(rp, dict):
            data["reward_params"] = RewardParams(float(rp["alpha"]), float(rp["beta"]))
        elif rp is not None:
            data["reward_params"] = rp
        for key in ("hidden", "adam_betas"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class EpisodeBatch:
    features: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    old_probs: np.ndarray
    accuracies: np.ndarray
    costs: np.ndarray
    n_actions: int
    mean_entropy: float = 0.0

    def __post_init__(self):
        n = len(self.actions)
        if not (len(self.features) == len(self.rewards) == len(self.old_probs) == n):
            raise ValueError("batch arrays must have equal length")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.features[i], int(self.actions[i]), float(self.rewards[i]), float(self.old_probs[i]))
            for i in range(len(self))
        ]

    @property
    def action_histogram(self) -> list[int]:
        return histogram(self.actions, self.n_actions)

    def summary(self) -> dict:
        return {
            "mean_reward": float(self.rewards.mean()),
            "mean_accuracy": float(self.accuracies.mean()),
            "mean_cost": float(self.costs.mean()),
            "action_histogram": self.action_histogram,
        }


def _rng(seed: int, purpose: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, episode]))


def collect_batch(net: PolicyValueNet, env, config: PPOConfig, episode_index: int) -> EpisodeBatch:
    """Run ``batch_size`` one-step episodes under the current (frozen) policy."""
    queries = [env.next_query() for _ in range(config.batch_size)]
    feats = np.stack([q.features for q in queries])
    policy, _ = forward(net, feats)
    rng = _rng(config.seed, 0, episode_index)
    actions = np.empty(len(queries), dtype=np.int64)
    probs = np.empty(len(queries))
    rewards = np.empty(len(queries))
    accs = np.empty(len(queries))
    costs = np.empty(len(queries))
    for i, q in enumerate(queries):
        a, p = sample_action(policy[i], rng)
        outcome: Outcome = env.execute(q, a)
        actions[i], probs[i] = a, p
        rewards[i] = compute_reward(outcome, config.reward_params)
        accs[i], costs[i] = outcome.accuracy, outcome.observed_cost
    return EpisodeBatch(
        feats, actions, rewards, probs, accs, costs, net.n_actions, float(entropy(policy).mean())
    )


def standardize(x: np.ndarray, var_floor: float = 1e-8) -> np.ndarray:
    return (x - x.mean()) / np.sqrt(max(float(x.var()), var_floor))


def compute_advantages(batch: EpisodeBatch, net: PolicyValueNet, normalize: bool = True) -> np.ndarray:
    """``reward - V(features)`` under the current value head, optionally standardized."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    _, values = forward(net, batch.features)
    adv = batch.rewards - values
    return standardize(adv) if normalize else adv


def clipped_surrogate(ratio, advantage, clip_epsilon: float):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon) * advantage)


@dataclass
class PPOLosses:
    policy_objective: float
    value_loss: float
    entropy: float
    gradient: np.ndarray = field(repr=False)
    mean_ratio: float
    clip_fraction: float


def ppo_losses(
    net: PolicyValueNet,
    features: np.ndarray,
    actions: np.ndarray,
    old_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    config: PPOConfig,
) -> PPOLosses:
    """Clipped surrogate + entropy objective and value loss on one minibatch.

    ``gradient`` is for *descent* on ``-policy_objective + value_coef * value_loss``.
    """
    old_probs = np.asarray(old_probs, dtype=np.float64)
    if np.any(old_probs <= 0):
        raise ValueError("old_prob of 0 in batch: stored transitions are corrupt")
    actions = np.asarray(actions, dtype=np.int64)
    m = len(actions)
    logits, values = forward_logits(net, features)
    logits, values = np.atleast_2d(logits), np.atleast_1d(values)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(m)
    ratio = np.exp(logp_all[rows, actions] - np.log(old_probs))

    eps = config.clip_epsilon
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * advantages
    surrogate = np.minimum(unclipped, clipped)
    # the unclipped branch carries gradient; when r is inside the band both branches coincide
    active = unclipped <= clipped
    ent = -np.sum(probs * logp_all, axis=1)

    policy_objective = float(surrogate.mean() + config.entropy_coef * ent.mean())
    value_err = values - returns
    value_loss = float(np.mean(value_err**2))

    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    d_surr_d_logp = ratio * advantages * active
    d_obj = d_surr_d_logp[:, None] * (onehot - probs)
    d_ent = -probs * (logp_all + ent[:, None])
    d_obj = (d_obj + config.entropy_coef * d_ent) / m
    dlogits = -d_obj
    dvalue = config.value_coef * 2.0 * value_err / m
    grad = backward(net, features, dlogits, dvalue)

    outside = (ratio < 1 - eps) | (ratio > 1 + eps)
    return PPOLosses(policy_objective, value_loss, float(ent.mean()), grad, float(ratio.mean()), float(outside.mean()))


class TrainingDivergence(RuntimeError):
    """Training produced non-finite values; ``net`` holds the last finite parameters."""

    def __init__(self, message: str, net: PolicyValueNet, log: list[dict]):
        super().__init__(message)
        self.net = net
        self.log = log


@dataclass
class TrainResult:
    net: PolicyValueNet
    log: list[dict]
    opt_state: OptimizerState


def train(
    env,
    config: PPOConfig,
    on_episode: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Full training loop. ``env`` is anything with ``next_query``/``execute``,
    ``feature_dim`` and ``n_actions``. Deterministic given ``config.seed`` and the env.
    """
    net = init(
        int(np.random.SeedSequence([config.seed, 2]).generate_state(1)[0]),
        env.feature_dim, config.hidden, env.n_actions, config.shared_trunk,
    )
    opt = OptimizerState.for_net(net, lr=config.learning_rate, beta1=config.adam_betas[0], beta2=config.adam_betas[1])
    records: list[dict] = []

    for episode in range(config.episodes):
        batch = collect_batch(net, env, config, episode)
        adv = compute_advantages(batch, net, config.advantage_normalization)
        returns = batch.rewards
        shuffle_rng = _rng(config.seed, 1, episode)
        objs, vlosses, epoch_ratios, clip_fracs = [], [], [], []
        first_step_clip = None
        unstable = False
        for _ in range(config.k_epochs):
            perm = shuffle_rng.permutation(len(batch))
            ratios = []
            for start in range(0, len(batch), config.minibatch_size):
                idx = perm[start : start + config.minibatch_size]
                losses = ppo_losses(
                    net, batch.features[idx], batch.actions[idx], batch.old_probs[idx], adv[idx], returns[idx], config
                )
                if first_step_clip is None:
                    first_step_clip = losses.clip_fraction
                try:
                    apply_update(net, opt, losses.gradient, "descend", config.max_grad_norm)
                except DivergenceError as exc:
                    raise TrainingDivergence(f"episode {episode}: {exc}", net, records) from exc
                objs.append(losses.policy_objective)
                vlosses.append(losses.value_loss)
                ratios.append(losses.mean_ratio)
                clip_fracs.append(losses.clip_fraction)
            epoch_ratio = float(np.mean(ratios))
            epoch_ratios.append(epoch_ratio)
            if not (RATIO_SANE_RANGE[0] <= epoch_ratio <= RATIO_SANE_RANGE[1]):
                unstable = True
                log.warning("episode %d: mean ratio %.3f outside %s", episode, epoch_ratio, RATIO_SANE_RANGE)

        record = {
            "episode": episode,
            **batch.summary(),
            "entropy": batch.mean_entropy,
            "policy_objective": float(np.mean(objs)),
            "value_loss": float(np.mean(vlosses)),
            "mean_ratio": epoch_ratios[-1],
            "clip_fraction": float(np.mean(clip_fracs)),
            "first_step_clip_fraction": first_step_clip,
            "ratio_unstable": unstable,
            "advantage_normalization": config.advantage_normalization,
        }
        records.append(record)
        if on_episode is not None:
            on_episode(record)

    return TrainResult(net, records, opt)


def greedy_actions(net: PolicyValueNet, features: np.ndarray) -> np.ndarray:
    logits, _ = forward_logits(net, np.atleast_2d(features))
    return np.argmax(np.atleast_2d(logits), axis=1)


def policy_probabilities(net: PolicyValueNet, features: np.ndarray) -> np.ndarray:
    logits, _ = forward_logits(net, np.atleast_2d(features))
    return softmax(np.atleast_2d(logits))
