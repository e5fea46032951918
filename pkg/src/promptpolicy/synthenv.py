"""Synthetic query generator and simulated SLM environment.

Each strategy succeeds with a probability that falls logistically with the
hidden query difficulty; observed cost is the strategy's mean cost times a
small zero-mean multiplicative perturbation. Everything is a pure function of
``(EnvConfig, stream, index, action)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit

from .domain import DEFAULT_LIBRARY, DomainError, Outcome, QueryState, StrategyLibrary

# Query streams: disjoint query populations for each purpose.
TRAIN_STREAM = 1
TUNING_STREAM = 2
EVAL_STREAM_BASE = 1_000

# E|eps| for eps ~ N(0, 1); subtracting it keeps the cost perturbation zero-mean.
_HALF_NORMAL_MEAN = math.sqrt(2.0 / math.pi)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyProfile:
    floor: float = 0.05
    ceiling: float = 0.99
    threshold: float = 0.5
    sharpness: float = 8.0
    mean_cost: float = 1.0
    cost_noise_scale: float = 0.0

    def __post_init__(self):
        # floor == ceiling is allowed: it gives the degenerate constant-success arms used in tests.
        if not (0.0 <= self.floor <= self.ceiling <= 1.0):
            raise DomainError(f"need 0 <= floor <= ceiling <= 1, got {self.floor}, {self.ceiling}")
        if not self.sharpness > 0:
            raise DomainError(f"sharpness must be positive, got {self.sharpness}")
        if not self.mean_cost > 0:
            raise DomainError(f"mean_cost must be positive, got {self.mean_cost}")
        # the lowest possible multiplier is 1 - scale * E|eps|, which must stay positive
        if not (0.0 <= self.cost_noise_scale < 1.0 / _HALF_NORMAL_MEAN):
            raise DomainError(f"cost_noise_scale must lie in [0, {1 / _HALF_NORMAL_MEAN:.4f}), got {self.cost_noise_scale}")


def _sample_uniform01(rng: np.random.Generator) -> float:
    return float(rng.random())


def _expected_success_uniform01(p: StrategyProfile) -> float:
    # closed form: the integral of expit(k (t - d)) over d in [0, 1] is a softplus difference
    k, t = p.sharpness, p.threshold
    mass = (np.logaddexp(0.0, k * t) - np.logaddexp(0.0, k * (t - 1.0))) / k
    return float(p.floor + (p.ceiling - p.floor) * mass)


DIFFICULTY_DISTRIBUTIONS = {
    "uniform01": (_sample_uniform01, _expected_success_uniform01),
}


@dataclass(frozen=True)
class EnvConfig:
    profiles: tuple[StrategyProfile, ...]
    feature_dim: int = 16
    informative_dims: int = 4
    feature_noise_sigma: float = 0.05
    difficulty_distribution: str = "uniform01"
    master_seed: int = 0
    library: StrategyLibrary = DEFAULT_LIBRARY

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if len(self.profiles) != len(self.library):
            raise DomainError(f"{len(self.profiles)} profiles for {len(self.library)} strategies")
        if self.feature_dim < 1:
            raise DomainError("feature_dim must be >= 1")
        if not (1 <= self.informative_dims <= self.feature_dim):
            raise DomainError(f"informative_dims must lie in [1, {self.feature_dim}], got {self.informative_dims}")
        if self.feature_noise_sigma < 0:
            raise DomainError("feature_noise_sigma must be >= 0")
        if self.difficulty_distribution not in DIFFICULTY_DISTRIBUTIONS:
            raise DomainError(f"unknown difficulty_distribution {self.difficulty_distribution!r}")
        if self.master_seed < 0:
            raise DomainError("master_seed must be unsigned")

    @property
    def n_actions(self) -> int:
        return len(self.profiles)

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "informative_dims": self.informative_dims,
            "feature_noise_sigma": self.feature_noise_sigma,
            "difficulty_distribution": self.difficulty_distribution,
            "master_seed": self.master_seed,
            "strategies": self.library.to_records(),
            "profiles": [
                {"name": s.name, **{k: getattr(p, k) for k in StrategyProfile.__dataclass_fields__}}
                for s, p in zip(self.library, self.profiles)
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EnvConfig":
        library = StrategyLibrary.from_records(data["strategies"]) if "strategies" in data else DEFAULT_LIBRARY
        fields = StrategyProfile.__dataclass_fields__
        by_name = {}
        for rec in data["profiles"]:
            unknown = set(rec) - set(fields) - {"name"}
            if unknown:
                raise DomainError(f"profile {rec.get('name')!r}: unknown fields {sorted(unknown)}")
            by_name[rec.get("name")] = StrategyProfile(**{k: float(v) for k, v in rec.items() if k != "name"})
        missing = [s.name for s in library if s.name not in by_name]
        if missing:
            raise DomainError(f"no profile for strategies {missing}")
        return cls(
            profiles=tuple(by_name[s.name] for s in library),
            feature_dim=int(data.get("feature_dim", 16)),
            informative_dims=int(data.get("informative_dims", 4)),
            feature_noise_sigma=float(data.get("feature_noise_sigma", 0.05)),
            difficulty_distribution=str(data.get("difficulty_distribution", "uniform01")),
            master_seed=int(data.get("master_seed", 0)),
            library=library,
        )


def informative_transform(j: int, d: float) -> float:
    """Noise-free value of informative feature ``j`` (j >= 1) at difficulty ``d``.

    Cycles through powers and sinusoids of increasing order:
    d^2, sin(pi d), cos(pi d), d^3, sin(2 pi d), cos(2 pi d), ...
    """
    kind, order = (j - 1) % 3, (j - 1) // 3 + 1
    if kind == 0:
        return d ** (order + 1)
    if kind == 1:
        return math.sin(order * math.pi * d)
    return math.cos(order * math.pi * d)


def _query_seed_sequence(config: EnvConfig, index: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([config.master_seed, stream, index])


def generate_query(config: EnvConfig, index: int, stream: int = 0) -> QueryState:
    """Deterministic query number ``index`` of ``stream``.

    Streams partition the query space so training and evaluation never share
    queries; within a stream, the same index always gives the same query.
    """
    ss = _query_seed_sequence(config, index, stream)
    rng = np.random.default_rng(ss)
    sampler, _ = DIFFICULTY_DISTRIBUTIONS[config.difficulty_distribution]
    d = sampler(rng)
    noise = rng.standard_normal(config.feature_dim)
    sigma = config.feature_noise_sigma
    feats = noise.copy()
    feats[0] = d + sigma * noise[0]
    for j in range(1, config.informative_dims):
        feats[j] = informative_transform(j, d) + sigma * noise[j]
    seed = int(ss.spawn(1)[0].generate_state(1, np.uint64)[0])
    return QueryState(latent_difficulty=d, features=feats, seed=seed, index=index)


def success_probability(profile: StrategyProfile, d):
    """``floor + (ceiling - floor) * logistic(sharpness * (threshold - d))``; works on arrays."""
    return profile.floor + (profile.ceiling - profile.floor) * expit(profile.sharpness * (profile.threshold - d))


def step(config: EnvConfig, query: QueryState, action: int) -> Outcome:
    """Execute strategy ``action`` on ``query``; identical arguments give identical outcomes."""
    if not (0 <= action < config.n_actions) or int(action) != action:
        raise DomainError(f"unknown strategy id {action!r} (have {config.n_actions})")
    if query.latent_difficulty is None:
        raise DomainError("synthetic environment needs queries with a latent difficulty")
    profile = config.profiles[int(action)]
    rng = np.random.default_rng([query.seed, int(action)])
    u = rng.random()
    eps = rng.standard_normal()
    accuracy = int(u < success_probability(profile, query.latent_difficulty))
    cost = profile.mean_cost * (1.0 + profile.cost_noise_scale * (abs(eps) - _HALF_NORMAL_MEAN))
    return Outcome(accuracy=accuracy, observed_cost=float(cost))


def expected_success(config: EnvConfig, profile: StrategyProfile) -> float:
    """Expectation of the success probability over the difficulty distribution."""
    _, expectation = DIFFICULTY_DISTRIBUTIONS[config.difficulty_distribution]
    return expectation(profile)


@dataclass(frozen=True)
class CalibrationTarget:
    mean_accuracy: float
    mean_cost: float
    source: str = ""


# Per-strategy (accuracy, cost) targets. FS and GFP accuracies are interpolations,
# not reported numbers; FS and GFP costs fall back to the cost proxies.
DEFAULT_TARGETS: dict[str, CalibrationTarget] = {
    "ZS": CalibrationTarget(0.552, 1.1, "reported: Fixed ZS"),
    "FS": CalibrationTarget(0.65, 1.5, "interpolated; cost = proxy"),
    "CoT": CalibrationTarget(0.750, 4.0, "reported: Fixed CoT"),
    "GFP": CalibrationTarget(0.82, 5.5, "interpolated; cost = proxy"),
    "SC": CalibrationTarget(0.891, 20.5, "reported: Fixed SC"),
}

DEFAULT_TEMPLATE = StrategyProfile(floor=0.05, ceiling=0.99, sharpness=8.0, cost_noise_scale=0.1)


@dataclass
class CalibrationReport:
    rows: list[dict] = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return max((abs(r["achieved_accuracy"] - r["target_accuracy"]) for r in self.rows), default=0.0)


def calibrate(
    targets: Mapping[str, CalibrationTarget] | None = None,
    template: StrategyProfile | Mapping[str, StrategyProfile] = DEFAULT_TEMPLATE,
    base: EnvConfig | None = None,
    tol: float = 1e-4,
    grid_points: int = 1000,
) -> tuple[EnvConfig, CalibrationReport]:
    """Fit each strategy's threshold so its expected accuracy hits the target.

    ``template`` supplies floor, ceiling, sharpness and cost noise (one shared
    template or one per strategy name); only the threshold is solved for, by
    bisection. Raises CalibrationError listing every unreachable target, or if
    the fitted profiles are not pointwise ordered by cost.
    """
    targets = dict(DEFAULT_TARGETS if targets is None else targets)
    library = base.library if base is not None else DEFAULT_LIBRARY
    if base is None:
        base = EnvConfig(profiles=tuple(StrategyProfile() for _ in library), library=library)

    profiles, report, failures = [], CalibrationReport(), []
    for strat in library:
        if strat.name not in targets:
            failures.append(f"{strat.name}: no calibration target")
            continue
        tgt = targets[strat.name]
        tmpl = template[strat.name] if isinstance(template, Mapping) else template
        tmpl = replace(tmpl, mean_cost=float(tgt.mean_cost))

        def residual(tau: float) -> float:
            return expected_success(base, replace(tmpl, threshold=tau)) - tgt.mean_accuracy

        # wide enough that the logistic is saturated at both ends of [0, 1]
        span = 40.0 / tmpl.sharpness
        lo, hi = -span, 1.0 + span
        r_lo, r_hi = residual(lo), residual(hi)
        if not (r_lo < 0 < r_hi):
            failures.append(
                f"{strat.name}: target accuracy {tgt.mean_accuracy} not reachable in "
                f"({r_lo + tgt.mean_accuracy:.6f}, {r_hi + tgt.mean_accuracy:.6f})"
            )
            continue
        tau = bisect(residual, lo, hi, xtol=1e-14, maxiter=200)
        prof = replace(tmpl, threshold=float(tau))
        achieved = expected_success(base, prof)
        if abs(achieved - tgt.mean_accuracy) > tol:
            failures.append(f"{strat.name}: residual {achieved - tgt.mean_accuracy:.2e} exceeds {tol}")
        profiles.append(prof)
        report.rows.append(
            {
                "strategy": strat.name,
                "threshold": prof.threshold,
                "target_accuracy": tgt.mean_accuracy,
                "achieved_accuracy": achieved,
                "mean_cost": prof.mean_cost,
                "source": tgt.source,
            }
        )
    if failures:
        raise CalibrationError("; ".join(failures))

    config = replace(base, profiles=tuple(profiles))
    violations = ordering_violations(config, grid_points)
    if violations:
        raise CalibrationError("calibrated profiles are not pointwise ordered: " + "; ".join(violations))
    return config, report


def ordering_violations(config: EnvConfig, grid_points: int = 1000) -> list[str]:
    """Pairs of adjacent strategies where the costlier one is worse somewhere on a d grid."""
    grid = np.linspace(0.0, 1.0, grid_points)
    order = sorted(range(config.n_actions), key=lambda i: (config.profiles[i].mean_cost, i))
    curves = [success_probability(config.profiles[i], grid) for i in order]
    out = []
    for (i, a), (j, b) in zip(zip(order, curves), zip(order[1:], curves[1:])):
        worst = float(np.max(a - b))
        if worst > 1e-12:
            out.append(f"{config.library[j].name} below {config.library[i].name} by {worst:.3g}")
    return out


class SyntheticEnvironment:
    """Stateful cursor over one query stream of a synthetic EnvConfig."""

    def __init__(self, config: EnvConfig, stream: int = 0, start_index: int = 0):
        self.config = config
        self.stream = stream
        self._next = start_index

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def library(self) -> StrategyLibrary:
        return self.config.library

    def next_query(self) -> QueryState:
        q = generate_query(self.config, self._next, self.stream)
        self._next += 1
        return q

    def execute(self, query: QueryState, action: int) -> Outcome:
        return step(self.config, query, action)
