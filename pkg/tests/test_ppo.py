import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import bandit_env, certain_env
from promptpolicy import ppo
from promptpolicy.domain import RewardParams
from promptpolicy.policynet import PolicyValueNet, forward, init, one_hot_net, zeros
from promptpolicy.ppo import (
    EpisodeBatch,
    PPOConfig,
    TrainingDivergence,
    clipped_surrogate,
    collect_batch,
    compute_advantages,
    policy_probabilities,
    ppo_losses,
    train,
)
from promptpolicy.synthenv import TRAIN_STREAM, SyntheticEnvironment

SMALL = PPOConfig(batch_size=64, minibatch_size=32, k_epochs=2, episodes=5, hidden=(16,))


def batch_of(rewards, d=4):
    n = len(rewards)
    return EpisodeBatch(np.zeros((n, d)), np.zeros(n, dtype=int), np.asarray(rewards, float), np.full(n, 0.2),
                        np.ones(n), np.ones(n), 5)


class TestCollect:
    def test_one_hot_policy(self, calibrated_env):
        env = SyntheticEnvironment(calibrated_env, TRAIN_STREAM)
        b = collect_batch(one_hot_net(16, 3), env, PPOConfig(batch_size=100), 0)
        assert b.action_histogram == [0, 0, 0, 100, 0]
        assert np.all(b.old_probs == 1.0)

    def test_certain_env_zero_beta(self):
        env = SyntheticEnvironment(certain_env())
        cfg = PPOConfig(batch_size=128, reward_params=RewardParams(7.0, 0.0))
        b = collect_batch(init(0, 16), env, cfg, 0)
        assert np.all(b.rewards == 7.0)

    def test_fixed_sc_mean_reward(self, calibrated_env):
        env = SyntheticEnvironment(calibrated_env, TRAIN_STREAM)
        b = collect_batch(one_hot_net(16, 4), env, PPOConfig(batch_size=8192), 0)
        # substitution of the SC aggregates: 10 * 0.891 - 20.5
        assert b.rewards.mean() == pytest.approx(10 * 0.891 - 20.5, abs=0.3)

    def test_transitions(self, calibrated_env):
        env = SyntheticEnvironment(calibrated_env, TRAIN_STREAM)
        b = collect_batch(init(0, 16), env, PPOConfig(batch_size=8, minibatch_size=8), 0)
        t = b.transitions
        assert len(t) == 8 and all(0 < x.old_prob <= 1 for x in t)


class TestAdvantages:
    def test_perfect_value_head(self):
        net = zeros(4, (3,), 5)
        net.layer("value")[1][0] = 2.5
        adv = compute_advantages(batch_of([2.5, 2.5, 2.5]), net, normalize=False)
        assert np.all(adv == 0)

    def test_zero_value_head(self):
        net = zeros(4, (3,), 5)
        assert np.array_equal(compute_advantages(batch_of([1.0, 3.0]), net, False), [1.0, 3.0])
        assert np.allclose(compute_advantages(batch_of([1.0, 3.0]), net, True), [-1.0, 1.0])

    def test_identical_rewards_normalized(self):
        adv = compute_advantages(batch_of([4.0] * 6), zeros(4, (3,), 5), True)
        assert np.all(adv == 0)


class TestObjective:
    def test_clip_arithmetic(self):
        assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
        assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
        assert clipped_surrogate(1.1, 2.0, 0.2) == pytest.approx(2.2)

    def test_first_update_identity(self):
        net = init(0, 4, (5,), 5)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 4))
        probs, _ = forward(net, x)
        actions = rng.integers(0, 5, 10)
        old = probs[np.arange(10), actions]
        adv = rng.normal(size=10)
        cfg = PPOConfig(entropy_coef=0.05)
        out = ppo_losses(net, x, actions, old, adv, np.zeros(10), cfg)
        h = -np.sum(probs * np.log(probs), axis=1).mean()
        assert out.mean_ratio == pytest.approx(1.0, abs=1e-12)
        assert out.policy_objective == pytest.approx(adv.mean() + 0.05 * h, abs=1e-12)
        assert out.clip_fraction == 0.0

    def test_rejects_zero_old_prob(self):
        net = init(0, 4, (5,), 5)
        with pytest.raises(ValueError):
            ppo_losses(net, np.zeros((2, 4)), [0, 1], [0.2, 0.0], np.ones(2), np.ones(2), PPOConfig())

    @pytest.mark.parametrize("shared", [True, False])
    def test_gradient_matches_finite_differences(self, shared):
        rng = np.random.default_rng(1)
        net = init(2, 3, (4,), 5, shared)
        x = rng.normal(size=(12, 3))
        actions = rng.integers(0, 5, 12)
        probs, _ = forward(net, x)
        # spread ratios across the clip band so both branches are exercised
        old = probs[np.arange(12), actions] * rng.uniform(0.6, 1.5, 12)
        adv = rng.normal(size=12)
        ret = rng.normal(size=12)
        cfg = PPOConfig(entropy_coef=0.1)

        def total(params):
            trial = PolicyValueNet(net.feature_dim, net.hidden, net.n_actions, params, shared)
            out = ppo_losses(trial, x, actions, old, adv, ret, cfg)
            return -out.policy_objective + cfg.value_coef * out.value_loss

        out = ppo_losses(net, x, actions, old, adv, ret, cfg)
        assert 0 < out.clip_fraction < 1
        h = 1e-6
        num = np.empty(net.n_params)
        for i in range(net.n_params):
            p = net.params.copy()
            p[i] += h
            up = total(p)
            p[i] -= 2 * h
            num[i] = (up - total(p)) / (2 * h)
        err = np.abs(out.gradient - num) / np.maximum(np.abs(out.gradient) + np.abs(num), 1e-8)
        assert err.max() <= 1e-4


class TestTrain:
    def test_deterministic(self, calibrated_env):
        a = train(SyntheticEnvironment(calibrated_env, TRAIN_STREAM), SMALL)
        b = train(SyntheticEnvironment(calibrated_env, TRAIN_STREAM), SMALL)
        assert a.log == b.log
        assert a.net.params.tobytes() == b.net.params.tobytes()

    def test_seed_changes_run(self, calibrated_env):
        a = train(SyntheticEnvironment(calibrated_env, TRAIN_STREAM), SMALL)
        b = train(SyntheticEnvironment(calibrated_env, TRAIN_STREAM), replace(SMALL, seed=1))
        assert a.net.params.tobytes() != b.net.params.tobytes()

    def test_log_records(self, calibrated_env):
        seen = []
        res = train(SyntheticEnvironment(calibrated_env, TRAIN_STREAM), SMALL, on_episode=seen.append)
        assert seen == res.log and [r["episode"] for r in res.log] == list(range(5))
        for r in res.log:
            assert sum(r["action_histogram"]) == SMALL.batch_size
            assert 0 <= r["entropy"] <= math.log(5) + 1e-12
            assert r["first_step_clip_fraction"] == 0.0

    def test_zero_episodes(self, calibrated_env):
        res = train(SyntheticEnvironment(calibrated_env, TRAIN_STREAM), replace(SMALL, episodes=0))
        assert res.log == [] and res.opt_state.step == 0
        assert np.all(np.isfinite(res.net.params))

    def test_entropy_bonus_pushes_to_uniform(self):
        env = SyntheticEnvironment(certain_env())
        # constant rewards: once V fits R the only remaining signal is the entropy term
        cfg = PPOConfig(reward_params=RewardParams(1.0, 0.0), entropy_coef=10.0, episodes=100, batch_size=64,
                        minibatch_size=32, learning_rate=1e-3, advantage_normalization=False)
        res = train(env, cfg)
        x = np.stack([env.next_query().features for _ in range(500)])
        assert np.max(np.abs(policy_probabilities(res.net, x) - 0.2)) <= 0.02

    def test_reward_scaling_keeps_argmax(self):
        greedy = []
        for scale in (1.0, 5.0):
            env = SyntheticEnvironment(bandit_env(best=1))
            cfg = PPOConfig(reward_params=RewardParams(scale, 0.0), episodes=40, batch_size=128,
                            minibatch_size=64, learning_rate=3e-3, hidden=(16,))
            res = train(env, cfg)
            x = np.stack([env.next_query().features for _ in range(200)])
            greedy.append(np.argmax(policy_probabilities(res.net, x), axis=1))
        assert np.array_equal(greedy[0], greedy[1]) and np.all(greedy[0] == 1)

    def test_divergence_keeps_last_good(self, calibrated_env, monkeypatch):
        real = ppo.ppo_losses
        calls = {"n": 0}

        def poisoned(*a, **k):
            out = real(*a, **k)
            calls["n"] += 1
            if calls["n"] > 6:  # 2 epochs x 2 minibatches per episode: fails during episode 1
                out.gradient[:] = np.nan
            return out

        monkeypatch.setattr(ppo, "ppo_losses", poisoned)
        with pytest.raises(TrainingDivergence) as info:
            train(SyntheticEnvironment(calibrated_env, TRAIN_STREAM), SMALL)
        assert len(info.value.log) == 1
        assert np.all(np.isfinite(info.value.net.params))

    def test_ratio_warning(self, calibrated_env, caplog, monkeypatch):
        real = ppo.ppo_losses

        def drifting(*a, **k):
            return replace(real(*a, **k), mean_ratio=9.0)

        monkeypatch.setattr(ppo, "ppo_losses", drifting)
        cfg = replace(SMALL, episodes=2)
        with caplog.at_level(logging.WARNING, logger="promptpolicy.ppo"):
            res = train(SyntheticEnvironment(calibrated_env, TRAIN_STREAM), cfg)
        assert any(r["ratio_unstable"] for r in res.log)
        assert "mean ratio" in caplog.text


class TestConfig:
    def test_roundtrip(self):
        cfg = PPOConfig(reward_params=RewardParams(30, 1), hidden=(8, 8))
        assert PPOConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [{"clip_epsilon": 0.0}, {"k_epochs": 0}, {"minibatch_size": 512}, {"episodes": -1}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            PPOConfig(**bad)

    def test_unknown_field(self):
        with pytest.raises(ValueError):
            PPOConfig.from_dict({"gamma": 0.99})
