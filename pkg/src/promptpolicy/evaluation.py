"""Policy rollouts, comparative metrics, and the alpha/beta Pareto sweep."""

from __future__ import annotations

import io
import logging
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .domain import RewardParams, efficiency_gain, histogram
from .policynet import PolicyValueNet, save_checkpoint
from .ppo import PPOConfig, TrainingDivergence, greedy_actions, policy_probabilities, train
from .synthenv import EVAL_STREAM_BASE, TRAIN_STREAM, EnvConfig, SyntheticEnvironment, generate_query, step

log = logging.getLogger(__name__)

Policy = Callable[..., np.ndarray]


@dataclass(frozen=True)
class GreedyPolicy:
    """Argmax of the network's policy head."""

    net: PolicyValueNet
    label: str = "PPN"

    def __call__(self, features, indices=None) -> np.ndarray:
        return greedy_actions(self.net, features)


@dataclass(frozen=True)
class SampledPolicy:
    """Samples from the policy head; the draw for each query depends only on (seed, query index)."""

    net: PolicyValueNet
    seed: int = 0
    label: str = "PPN (sampled)"

    def __call__(self, features, indices=None) -> np.ndarray:
        probs = policy_probabilities(self.net, features)
        if indices is None:
            indices = np.arange(len(probs))
        out = np.empty(len(probs), dtype=np.int64)
        for row, (p, idx) in enumerate(zip(probs, indices)):
            u = np.random.default_rng([self.seed, int(idx)]).random()
            out[row] = min(int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right")), len(p) - 1)
        return out


@dataclass(frozen=True)
class RunMetrics:
    macro_accuracy: float
    mean_cost: float
    efficiency_gain_vs_ref: float
    action_histogram: tuple[int, ...]
    n_queries: int
    policy_label: str = ""
    reference_cost: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "action_histogram", tuple(int(c) for c in self.action_histogram))
        if sum(self.action_histogram) != self.n_queries:
            raise ValueError("action histogram must sum to n_queries")
        if not (0.0 <= self.macro_accuracy <= 1.0):
            raise ValueError(f"macro_accuracy out of [0, 1]: {self.macro_accuracy}")
        if not self.mean_cost > 0:
            raise ValueError("mean_cost must be positive")

    @property
    def usage(self) -> np.ndarray:
        return np.asarray(self.action_histogram, dtype=np.float64) / self.n_queries

    def to_dict(self) -> dict:
        return {
            "policy_label": self.policy_label,
            "macro_accuracy": self.macro_accuracy,
            "mean_cost": self.mean_cost,
            "efficiency_gain_vs_ref": self.efficiency_gain_vs_ref,
            "reference_cost": self.reference_cost,
            "action_histogram": list(self.action_histogram),
            "n_queries": self.n_queries,
        }


def reference_action(env: EnvConfig) -> int:
    """Fixed SC if the library has it, else the strategy with the largest mean cost."""
    try:
        return env.library.index("SC")
    except KeyError:
        return int(np.argmax([p.mean_cost for p in env.profiles]))


def _rollout_chunk(policy: Policy, env: EnvConfig, stream: int, indices: np.ndarray, ref: int):
    queries = [generate_query(env, int(i), stream) for i in indices]
    feats = np.stack([q.features for q in queries])
    actions = np.asarray(policy(feats, indices), dtype=np.int64)
    acc = np.empty(len(queries))
    cost = np.empty(len(queries))
    ref_cost = np.empty(len(queries))
    for k, (q, a) in enumerate(zip(queries, actions)):
        o = step(env, q, int(a))
        acc[k], cost[k] = o.accuracy, o.observed_cost
        ref_cost[k] = cost[k] if a == ref else step(env, q, ref).observed_cost
    return actions, acc, cost, ref_cost


def evaluate(
    policy: Policy,
    env: EnvConfig,
    n_queries: int = 20_000,
    eval_seed: int = 0,
    label: str | None = None,
    workers: int = 1,
    chunk_size: int = 2_000,
) -> RunMetrics:
    """Roll ``policy`` over ``n_queries`` fresh evaluation queries.

    The efficiency-gain reference is Fixed SC's observed cost on the very same
    queries. With ``workers > 1`` chunks run on a thread pool; per-query
    seeding makes the result identical to a sequential run.
    """
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    stream = EVAL_STREAM_BASE + eval_seed
    ref = reference_action(env)
    chunks = [np.arange(s, min(s + chunk_size, n_queries)) for s in range(0, n_queries, chunk_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ix: _rollout_chunk(policy, env, stream, ix, ref), chunks))
    else:
        parts = [_rollout_chunk(policy, env, stream, ix, ref) for ix in chunks]
    actions, acc, cost, ref_cost = (np.concatenate(p) for p in zip(*parts))
    mean_cost = float(cost.mean())
    reference_cost = float(ref_cost.mean())
    return RunMetrics(
        macro_accuracy=float(acc.mean()),
        mean_cost=mean_cost,
        efficiency_gain_vs_ref=efficiency_gain(mean_cost, reference_cost),
        action_histogram=tuple(histogram(actions, env.n_actions)),
        n_queries=n_queries,
        policy_label=label if label is not None else getattr(policy, "label", ""),
        reference_cost=reference_cost,
    )


@dataclass(frozen=True)
class ParetoPoint:
    alpha: float
    beta: float
    metrics: RunMetrics | None
    seed: int = 0
    checkpoint: str | None = None
    error: str | None = None

    @property
    def mean_cost(self) -> float:
        return self.metrics.mean_cost

    @property
    def macro_accuracy(self) -> float:
        return self.metrics.macro_accuracy

    def to_record(self) -> dict:
        rec = {"alpha": self.alpha, "beta": self.beta, "seed": self.seed, "checkpoint": self.checkpoint, "error": self.error}
        if self.metrics is not None:
            m = self.metrics
            rec.update(
                accuracy=m.macro_accuracy,
                cost=m.mean_cost,
                efficiency_gain=m.efficiency_gain_vs_ref,
                histogram=list(m.action_histogram),
            )
        return rec


@dataclass
class _SweepJob:
    env: EnvConfig
    ppo: PPOConfig
    alpha: float
    beta: float
    n_eval: int
    eval_seed: int
    checkpoint_path: str | None


def _run_sweep_job(job: _SweepJob) -> tuple[ParetoPoint, list[dict]]:
    try:
        result = train(SyntheticEnvironment(job.env, stream=TRAIN_STREAM), job.ppo)
    except TrainingDivergence as exc:
        log.error("sweep point alpha=%s beta=%s diverged: %s", job.alpha, job.beta, exc)
        return ParetoPoint(job.alpha, job.beta, None, job.ppo.seed, None, str(exc)), exc.log
    label = f"PPN (alpha={job.alpha:g}, beta={job.beta:g})"
    metrics = evaluate(GreedyPolicy(result.net, label), job.env, job.n_eval, job.eval_seed)
    ckpt = None
    if job.checkpoint_path is not None:
        ckpt = str(save_checkpoint(job.checkpoint_path, result.net, result.opt_state,
                                   extra={"alpha": job.alpha, "beta": job.beta, "seed": job.ppo.seed}))
    return ParetoPoint(job.alpha, job.beta, metrics, job.ppo.seed, ckpt), result.log


def sweep_seeds(master_seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(n)]


def pareto_sweep(
    env: EnvConfig,
    ppo_template: PPOConfig,
    weight_ratios: Sequence[tuple[float, float]],
    master_seed: int = 0,
    n_eval: int = 20_000,
    eval_seed: int = 0,
    workers: int = 1,
    checkpoint_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
    return_logs: bool = False,
):
    """Train and evaluate one policy per (alpha, beta); points sorted by mean cost.

    A diverged point is kept with ``metrics=None`` and an error message
    instead of aborting the sweep; it sorts last.
    """
    if not weight_ratios:
        raise ValueError("weight_ratios must be nonempty")
    seeds = list(seeds) if seeds is not None else sweep_seeds(master_seed, len(weight_ratios))
    jobs = []
    for (alpha, beta), seed in zip(weight_ratios, seeds):
        cfg = replace(ppo_template, reward_params=RewardParams(float(alpha), float(beta)), seed=int(seed))
        path = None
        if checkpoint_dir is not None:
            path = str(Path(checkpoint_dir) / f"ppn_alpha{alpha:g}_beta{beta:g}.npz")
        jobs.append(_SweepJob(env, cfg, float(alpha), float(beta), n_eval, eval_seed, path))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_sweep_job, jobs))
    else:
        results = [_run_sweep_job(j) for j in jobs]
    order = sorted(range(len(results)), key=lambda i: (results[i][0].metrics is None,
                                                       results[i][0].metrics.mean_cost if results[i][0].metrics else 0.0))
    points = [results[i][0] for i in order]
    if return_logs:
        return points, [results[i][1] for i in order]
    return points


def _coords(p) -> tuple[float, float]:
    """(cost, accuracy) of a ParetoPoint, RunMetrics, or plain (cost, accuracy) pair."""
    if isinstance(p, ParetoPoint):
        p = p.metrics
    if isinstance(p, RunMetrics):
        return p.mean_cost, p.macro_accuracy
    return float(p[0]), float(p[1])


def dominates(a, b) -> bool:
    (ca, aa), (cb, ab) = _coords(a), _coords(b)
    return ca <= cb and aa >= ab and (ca < cb or aa > ab)


def dominance_witnesses(points: Sequence) -> dict[int, int]:
    """Map from index of each dominated point to the index of a point dominating it."""
    coords = [_coords(p) for p in points]
    order = sorted(range(len(points)), key=lambda i: (coords[i][0], -coords[i][1]))
    witnesses: dict[int, int] = {}
    best = None  # index with highest accuracy among strictly cheaper points
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and coords[order[j]][0] == coords[order[i]][0]:
            j += 1
        group = order[i:j]  # equal cost, accuracy descending
        top = group[0]
        for k in group:
            if coords[k][1] < coords[top][1]:
                witnesses[k] = top
            elif best is not None and coords[best][1] >= coords[k][1]:
                witnesses[k] = best
        if best is None or coords[top][1] > coords[best][1]:
            best = top
        i = j
    return witnesses


def pareto_filter(points: Iterable) -> list:
    """Points not dominated by any other, in stable order of increasing cost."""
    points = [p for p in points if not (isinstance(p, ParetoPoint) and p.metrics is None)]
    dominated = dominance_witnesses(points)
    keep = [p for i, p in enumerate(points) if i not in dominated]
    return sorted(keep, key=lambda p: _coords(p)[0])


TABLE_COLUMNS = ("method", "macro_accuracy_pct", "avg_cost", "efficiency_gain_pct", "strategy_usage")


def format_usage(metrics: RunMetrics, names: Sequence[str], min_share: float = 0.005) -> str:
    shares = sorted(zip(metrics.usage, names), key=lambda t: -t[0])
    return ", ".join(f"{n} ({100 * s:.0f}%)" for s, n in shares if s >= min_share)


def results_table(rows: Sequence[RunMetrics], names: Sequence[str], run_id: str | None = None, sep: str = "\t") -> str:
    """Comparative results as delimited text, one row per policy."""
    buf = io.StringIO()
    if run_id is not None:
        buf.write(f"# run_id: {run_id}\n")
    buf.write(sep.join(TABLE_COLUMNS) + "\n")
    for m in rows:
        buf.write(
            sep.join(
                [
                    m.policy_label,
                    f"{100 * m.macro_accuracy:.1f}",
                    f"{m.mean_cost:.2f}",
                    f"{100 * m.efficiency_gain_vs_ref:.1f}",
                    format_usage(m, names),
                ]
            )
            + "\n"
        )
    return buf.getvalue()
