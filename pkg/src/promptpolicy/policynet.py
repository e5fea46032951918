"""Feedforward policy/value network in plain numpy.

A tanh trunk feeds a softmax policy head and a scalar value head. All
parameters live in one flat float64 vector; each layer's weight matrix
(fan_in x fan_out, row-major) is followed by its bias, in the order
trunk, policy head, [value trunk], value head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class DivergenceError(FloatingPointError):
    """A gradient or parameter update produced NaN/Inf."""


@dataclass(frozen=True)
class _Layer:
    name: str
    fan_in: int
    fan_out: int
    w_offset: int

    @property
    def b_offset(self) -> int:
        return self.w_offset + self.fan_in * self.fan_out

    @property
    def end(self) -> int:
        return self.b_offset + self.fan_out


def _layout(feature_dim: int, hidden: Sequence[int], n_actions: int, shared_trunk: bool) -> list[_Layer]:
    layers: list[_Layer] = []
    offset = 0

    def add(name, fan_in, fan_out):
        nonlocal offset
        layer = _Layer(name, fan_in, fan_out, offset)
        layers.append(layer)
        offset = layer.end

    sizes = [feature_dim, *hidden]
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        add(f"trunk{i}", a, b)
    add("policy", sizes[-1], n_actions)
    if not shared_trunk:
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            add(f"vtrunk{i}", a, b)
    add("value", sizes[-1], 1)
    return layers


@dataclass
class PolicyValueNet:
    feature_dim: int
    hidden: tuple[int, ...]
    n_actions: int
    params: np.ndarray = field(repr=False)
    shared_trunk: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self._layers = _layout(self.feature_dim, self.hidden, self.n_actions, self.shared_trunk)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {self.params.shape}")

    @property
    def n_params(self) -> int:
        return self._layers[-1].end

    def layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(weight, bias) views into the flat parameter vector."""
        for lay in self._layers:
            if lay.name == name:
                w = self.params[lay.w_offset : lay.b_offset].reshape(lay.fan_in, lay.fan_out)
                return w, self.params[lay.b_offset : lay.end]
        raise KeyError(name)

    def _trunk_names(self, prefix: str) -> list[str]:
        return [f"{prefix}{i}" for i in range(len(self.hidden))]

    def copy(self) -> "PolicyValueNet":
        return PolicyValueNet(self.feature_dim, self.hidden, self.n_actions, self.params.copy(), self.shared_trunk)


def init(
    seed: int,
    feature_dim: int,
    hidden: Sequence[int] = (64, 64),
    n_actions: int = 5,
    shared_trunk: bool = True,
) -> PolicyValueNet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    if n_actions < 2:
        raise ValueError(f"need at least 2 actions, got {n_actions}")
    if not hidden or any(h < 1 for h in hidden):
        raise ValueError(f"hidden sizes must be positive, got {hidden}")
    rng = np.random.default_rng(seed)
    layers = _layout(feature_dim, hidden, n_actions, shared_trunk)
    params = np.zeros(layers[-1].end)
    for lay in layers:
        bound = 1.0 / np.sqrt(lay.fan_in)
        params[lay.w_offset : lay.b_offset] = rng.uniform(-bound, bound, lay.fan_in * lay.fan_out)
    return PolicyValueNet(feature_dim, tuple(hidden), n_actions, params, shared_trunk)


def zeros(feature_dim: int, hidden: Sequence[int] = (64, 64), n_actions: int = 5) -> PolicyValueNet:
    layers = _layout(feature_dim, hidden, n_actions, True)
    return PolicyValueNet(feature_dim, tuple(hidden), n_actions, np.zeros(layers[-1].end))


def one_hot_net(
    feature_dim: int, action: int, n_actions: int = 5, hidden: Sequence[int] = (64, 64), margin: float = 50.0
) -> PolicyValueNet:
    """Net frozen to a single action: zero weights, policy bias ``margin`` on ``action``."""
    net = zeros(feature_dim, hidden, n_actions)
    _, bias = net.layer("policy")
    bias[action] = margin
    return net


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) along the last axis; 0 log 0 = 0."""
    p = np.asarray(probs)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def _as_batch(net: PolicyValueNet, features) -> tuple[np.ndarray, bool]:
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != net.feature_dim:
        raise ValueError(f"features must have last dimension {net.feature_dim}, got shape {np.shape(features)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    return x, single


def _trunk_forward(net: PolicyValueNet, x: np.ndarray, prefix: str) -> list[np.ndarray]:
    acts = [x]
    for name in net._trunk_names(prefix):
        w, b = net.layer(name)
        acts.append(np.tanh(acts[-1] @ w + b))
    return acts


def _forward_cached(net: PolicyValueNet, x: np.ndarray):
    p_acts = _trunk_forward(net, x, "trunk")
    wp, bp = net.layer("policy")
    logits = p_acts[-1] @ wp + bp
    v_acts = p_acts if net.shared_trunk else _trunk_forward(net, x, "vtrunk")
    wv, bv = net.layer("value")
    value = (v_acts[-1] @ wv + bv)[:, 0]
    return logits, value, p_acts, v_acts


def forward_logits(net: PolicyValueNet, features) -> tuple[np.ndarray, np.ndarray]:
    x, single = _as_batch(net, features)
    logits, value, _, _ = _forward_cached(net, x)
    if single:
        return logits[0], value[0]
    return logits, value


def forward(net: PolicyValueNet, features):
    """Policy distribution and value for one feature vector or a batch of them."""
    logits, value = forward_logits(net, features)
    policy = softmax(logits)
    if np.ndim(value) == 0:
        return policy, float(value)
    return policy, value


def sample_action(policy: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Draw from a categorical distribution by inverse CDF; returns (action, its probability)."""
    cdf = np.cumsum(policy)
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    a = min(a, len(policy) - 1)
    # guard against landing on a zero-probability entry through rounding at the top of the cdf
    while policy[a] <= 0.0:
        a -= 1
    return a, float(policy[a])


def _trunk_backward(net, acts, upstream, prefix, grad):
    delta = upstream
    for i, name in reversed(list(enumerate(net._trunk_names(prefix)))):
        lay = next(l for l in net._layers if l.name == name)
        dz = delta * (1.0 - acts[i + 1] ** 2)
        grad[lay.w_offset : lay.b_offset] += (acts[i].T @ dz).ravel()
        grad[lay.b_offset : lay.end] += dz.sum(axis=0)
        w, _ = net.layer(name)
        delta = dz @ w.T


def backward(net: PolicyValueNet, features, dlogits, dvalue) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. every parameter, in the flat layout.

    ``dlogits`` (B, N) and ``dvalue`` (B,) are the loss's partial derivatives
    with respect to the policy logits and the value output for each row.
    """
    x, single = _as_batch(net, features)
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    dvalue = np.atleast_1d(np.asarray(dvalue, dtype=np.float64))
    if dlogits.shape != (x.shape[0], net.n_actions) or dvalue.shape != (x.shape[0],):
        raise ValueError(
            f"upstream shapes {dlogits.shape}, {dvalue.shape} do not match batch {x.shape[0]} x {net.n_actions}"
        )
    _, _, p_acts, v_acts = _forward_cached(net, x)
    grad = np.zeros(net.n_params)
    layers = {l.name: l for l in net._layers}

    pl = layers["policy"]
    grad[pl.w_offset : pl.b_offset] = (p_acts[-1].T @ dlogits).ravel()
    grad[pl.b_offset : pl.end] = dlogits.sum(axis=0)
    wp, _ = net.layer("policy")
    d_hidden_p = dlogits @ wp.T

    vl = layers["value"]
    dv = dvalue[:, None]
    grad[vl.w_offset : vl.b_offset] = (v_acts[-1].T @ dv).ravel()
    grad[vl.b_offset : vl.end] = dv.sum(axis=0)
    wv, _ = net.layer("value")
    d_hidden_v = dv @ wv.T

    if net.shared_trunk:
        _trunk_backward(net, p_acts, d_hidden_p + d_hidden_v, "trunk", grad)
    else:
        _trunk_backward(net, p_acts, d_hidden_p, "trunk", grad)
        _trunk_backward(net, v_acts, d_hidden_v, "vtrunk", grad)
    return grad


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: PolicyValueNet, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros(net.n_params), np.zeros(net.n_params), 0, lr, beta1, beta2, eps)


def apply_update(
    net: PolicyValueNet,
    state: OptimizerState,
    gradient: np.ndarray,
    direction: str = "descend",
    max_grad_norm: float | None = None,
) -> PolicyValueNet:
    """One Adam step, in place. ``ascend`` maximizes, ``descend`` minimizes.

    On a non-finite gradient or result, raises DivergenceError and leaves
    both the net and the optimizer state untouched.
    """
    if direction not in ("ascend", "descend"):
        raise ValueError(f"direction must be 'ascend' or 'descend', got {direction!r}")
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != net.params.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {net.params.shape}")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    if direction == "ascend":
        g = -g
    if max_grad_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > max_grad_norm:
            g = g * (max_grad_norm / norm)

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = net.params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(new_params)):
        raise DivergenceError(f"non-finite parameters after step {t}")

    net.params[:] = new_params
    state.m, state.v, state.step = m, v, t
    return net


def save_checkpoint(
    path: str | Path,
    net: PolicyValueNet,
    opt_state: OptimizerState | None = None,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a self-describing .npz: float64 little-endian arrays plus a JSON header."""
    path = Path(path)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "feature_dim": net.feature_dim,
        "hidden": list(net.hidden),
        "n_actions": net.n_actions,
        "shared_trunk": net.shared_trunk,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays = {"params": net.params.astype("<f8")}
    if opt_state is not None:
        meta["optimizer"] = {k: getattr(opt_state, k) for k in ("step", "lr", "beta1", "beta2", "eps")}
        arrays["adam_m"] = opt_state.m.astype("<f8")
        arrays["adam_v"] = opt_state.v.astype("<f8")
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


@dataclass
class Checkpoint:
    net: PolicyValueNet
    opt_state: OptimizerState | None
    rng_state: dict | None
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        net = PolicyValueNet(
            meta["feature_dim"], tuple(meta["hidden"]), meta["n_actions"],
            data["params"].astype(np.float64), meta["shared_trunk"],
        )
        opt = None
        if "optimizer" in meta:
            opt = OptimizerState(data["adam_m"].astype(np.float64), data["adam_v"].astype(np.float64), **meta["optimizer"])
    return Checkpoint(net, opt, meta.get("rng_state"), meta.get("extra", {}))
