import math

import numpy as np
import pytest

from helpers import assert_fd_match, fd_gradient
from promptpolicy.policynet import (
    DivergenceError,
    OptimizerState,
    apply_update,
    backward,
    entropy,
    forward,
    init,
    load_checkpoint,
    one_hot_net,
    sample_action,
    save_checkpoint,
    softmax,
    zeros,
)


NET_SHAPES = [
    (3, (4,), 2, True),
    (4, (5, 3), 3, True),
    (2, (3, 3, 2), 5, True),
    (5, (6,), 4, False),
    (3, (4, 4), 5, False),
]


@pytest.mark.parametrize("seed, shape", list(enumerate(NET_SHAPES)))
def test_backward_matches_finite_differences(seed, shape):
    d, hidden, n, shared = shape
    rng = np.random.default_rng(100 + seed)
    net = init(seed, d, hidden, n, shared)
    net.params[:] += rng.normal(0, 0.3, net.n_params)  # nonzero biases too
    x = rng.normal(size=(6, d))
    dlogits = rng.normal(size=(6, n))
    dvalue = rng.normal(size=6)
    assert_fd_match(backward(net, x, dlogits, dvalue), fd_gradient(net, x, dlogits, dvalue))


def test_zero_upstream_gives_zero_gradient():
    net = init(0, 4, (5,), 3)
    g = backward(net, np.ones((2, 4)), np.zeros((2, 3)), np.zeros(2))
    assert np.all(g == 0)


def test_value_head_untouched_by_policy_signal():
    net = init(1, 4, (5,), 3)
    g = backward(net, np.ones((2, 4)), np.ones((2, 3)), np.zeros(2))
    lay = next(l for l in net._layers if l.name == "value")
    assert np.all(g[lay.w_offset : lay.end] == 0)


def test_separate_trunk_isolated():
    net = init(1, 4, (5,), 3, shared_trunk=False)
    g = backward(net, np.ones((2, 4)), np.zeros((2, 3)), np.ones(2))
    for name in ("trunk0", "policy"):
        lay = next(l for l in net._layers if l.name == name)
        assert np.all(g[lay.w_offset : lay.end] == 0)


class TestConstruction:
    def test_parameter_count(self):
        net = init(0, 16)
        # independent count from layer shapes: (fan_in + 1) * fan_out per dense layer
        shapes = [(16, 64), (64, 64), (64, 5), (64, 1)]
        assert net.n_params == sum((i + 1) * o for i, o in shapes) == 5638

    def test_seed_determinism(self):
        assert np.array_equal(init(3, 16).params, init(3, 16).params)
        assert not np.array_equal(init(3, 16).params, init(4, 16).params)

    def test_init_bounds(self):
        net = init(0, 16)
        w, b = net.layer("trunk0")
        assert np.abs(w).max() <= 1 / math.sqrt(16)
        assert np.all(b == 0)

    def test_layer_views_alias_params(self):
        net = zeros(3, (4,), 2)
        w, _ = net.layer("policy")
        w[0, 0] = 1.0
        assert net.params.sum() == 1.0

    def test_rejects_single_action(self):
        with pytest.raises(ValueError):
            init(0, 4, (4,), 1)


class TestForward:
    def test_zero_net(self):
        net = zeros(16)
        x = np.random.default_rng(0).normal(size=(10, 16))
        policy, value = forward(net, x)
        assert np.allclose(policy, 0.2, atol=0)
        assert np.all(value == 0)

    def test_normalized(self):
        net = init(0, 16)
        x = np.random.default_rng(1).normal(size=(200, 16)) * 5
        policy, _ = forward(net, x)
        assert np.all(np.abs(policy.sum(axis=1) - 1) <= 1e-9)

    def test_bias_shift_invariance(self):
        net = init(0, 16)
        x = np.random.default_rng(2).normal(size=(5, 16))
        before, _ = forward(net, x)
        net.layer("policy")[1][:] += 37.0
        after, _ = forward(net, x)
        assert np.max(np.abs(before - after)) <= 1e-9

    def test_single_vs_batch(self):
        net = init(0, 16)
        x = np.random.default_rng(3).normal(size=(3, 16))
        pb, vb = forward(net, x)
        p0, v0 = forward(net, x[0])
        assert np.allclose(pb[0], p0) and vb[0] == pytest.approx(v0)

    def test_rejects_bad_features(self):
        net = init(0, 4, (4,), 2)
        with pytest.raises(ValueError):
            forward(net, np.zeros(3))
        with pytest.raises(ValueError):
            forward(net, np.array([0, 0, np.nan, 0]))

    def test_large_logits_stay_finite(self):
        p = softmax(np.array([1000.0, 0.0, -1000.0]))
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_entropy_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            p = softmax(rng.normal(0, rng.uniform(0.1, 30), 5))
            h = float(entropy(p))
            assert -1e-12 <= h <= math.log(5) + 1e-12
        assert float(entropy(np.full(5, 0.2))) == pytest.approx(math.log(5))
        assert float(entropy(np.eye(5)[2])) == 0.0


class TestSampleAction:
    def test_one_hot(self):
        rng = np.random.default_rng(0)
        p = np.eye(5)[3]
        assert all(sample_action(p, rng) == (3, 1.0) for _ in range(100))

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(0)
        p = np.full(5, 0.2)
        counts = np.bincount([sample_action(p, rng)[0] for _ in range(100_000)], minlength=5)
        assert np.all(np.abs(counts / 100_000 - 0.2) <= 0.005)

    def test_returned_prob_is_policy_entry(self):
        rng = np.random.default_rng(0)
        policy, _ = forward(init(0, 4, (4,), 5), np.ones(4))
        for _ in range(20):
            a, p = sample_action(policy, rng)
            assert p == policy[a]

    def test_one_hot_net(self):
        policy, _ = forward(one_hot_net(16, 2), np.ones(16))
        assert policy[2] == pytest.approx(1.0, abs=1e-20)


class TestAdam:
    def _scalar_net(self, w0):
        # D=1, hidden (1,), N=2: track one weight, zero everything else
        net = zeros(1, (1,), 2)
        net.params[0] = w0
        return net

    def test_zero_gradient_no_move(self):
        net = init(0, 4, (4,), 2)
        before = net.params.copy()
        apply_update(net, OptimizerState.for_net(net), np.zeros(net.n_params))
        assert np.array_equal(before, net.params)

    def test_quadratic_convergence(self):
        net = self._scalar_net(1.0)
        opt = OptimizerState.for_net(net, lr=0.1)
        reached = None
        for t in range(200):
            g = np.zeros(net.n_params)
            g[0] = 2 * net.params[0]
            apply_update(net, opt, g, "descend")
            if abs(net.params[0]) < 0.01:
                reached = t + 1
                break
        assert reached is not None

    def test_ascend_is_negated_descend(self):
        a, b = init(0, 3, (3,), 2), init(0, 3, (3,), 2)
        g = np.random.default_rng(0).normal(size=a.n_params)
        apply_update(a, OptimizerState.for_net(a), g, "descend")
        apply_update(b, OptimizerState.for_net(b), -g, "ascend")
        assert np.array_equal(a.params, b.params)

    def test_bitwise_identical_replicas(self):
        a, b = init(5, 4, (6,), 3), init(5, 4, (6,), 3)
        oa, ob = OptimizerState.for_net(a), OptimizerState.for_net(b)
        rng = np.random.default_rng(9)
        for _ in range(10):
            g = rng.normal(size=a.n_params)
            apply_update(a, oa, g)
            apply_update(b, ob, g.copy())
        assert a.params.tobytes() == b.params.tobytes()
        assert oa.step == ob.step == 10

    def test_nonfinite_gradient_leaves_state(self):
        net = init(0, 3, (3,), 2)
        opt = OptimizerState.for_net(net)
        apply_update(net, opt, np.ones(net.n_params))
        params, m, step = net.params.copy(), opt.m.copy(), opt.step
        bad = np.ones(net.n_params)
        bad[2] = np.nan
        with pytest.raises(DivergenceError):
            apply_update(net, opt, bad)
        assert np.array_equal(params, net.params) and np.array_equal(m, opt.m) and opt.step == step

    def test_grad_norm_clipping(self):
        net = init(0, 3, (3,), 2)
        opt = OptimizerState.for_net(net)
        apply_update(net, opt, np.full(net.n_params, 100.0), max_grad_norm=1.0)
        assert np.linalg.norm(opt.m) == pytest.approx(0.1, rel=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    for shared in (True, False):
        net = init(7, 16, shared_trunk=shared)
        opt = OptimizerState.for_net(net)
        apply_update(net, opt, np.random.default_rng(0).normal(size=net.n_params))
        path = save_checkpoint(tmp_path / f"c{shared}.npz", net, opt, {"note": 1}, {"alpha": 10})
        ck = load_checkpoint(path)
        assert ck.net.params.tobytes() == net.params.tobytes()
        assert ck.opt_state.m.tobytes() == opt.m.tobytes() and ck.opt_state.step == 1
        assert ck.rng_state == {"note": 1} and ck.extra == {"alpha": 10}
        x = np.random.default_rng(1).normal(size=(50, 16))
        p1, v1 = forward(net, x)
        p2, v2 = forward(ck.net, x)
        assert p1.tobytes() == p2.tobytes() and v1.tobytes() == v2.tobytes()
