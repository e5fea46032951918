"""YAML experiment configuration: loading, defaults, validation."""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path

import yaml

from .baselines import HeuristicConfig
from .domain import DomainError, StrategyLibrary
from .ppo import PPOConfig
from .synthenv import CalibrationTarget, EnvConfig, StrategyProfile

SECTIONS = ("strategies", "env", "ppo", "eval", "heuristic", "sweep", "backend")


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    text = resources.files("promptpolicy").joinpath("default_config.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown field")
        # targets are replaced wholesale so a file can drop strategies
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "targets":
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Defaults overlaid with the file at ``path`` (if any), then validated."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
            problem = getattr(exc, "problem", None) or str(exc)
            raise ConfigError(f"{where}: YAML parse error: {problem}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections {SECTIONS}")
        cfg = _merge(cfg, user)
    validate(cfg)
    return cfg


def _field(section: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (DomainError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def library_from(cfg: dict) -> StrategyLibrary:
    return _field("strategies", StrategyLibrary.from_records, cfg["strategies"])


def targets_from(cfg: dict) -> dict[str, CalibrationTarget]:
    out = {}
    for name, t in (cfg["env"].get("targets") or {}).items():
        out[name] = _field(f"env.targets.{name}", CalibrationTarget,
                           float(t["accuracy"]), float(t["cost"]), str(t.get("source", "")))
    return out


def template_from(cfg: dict) -> StrategyProfile:
    return _field("env.template", StrategyProfile, **{k: float(v) for k, v in cfg["env"]["template"].items()})


def env_from(cfg: dict) -> EnvConfig | None:
    """The calibrated EnvConfig, or None if ``env.profiles`` has not been filled in yet."""
    env = cfg["env"]
    if not env.get("profiles"):
        return None
    data = {k: env[k] for k in ("feature_dim", "informative_dims", "feature_noise_sigma",
                                "difficulty_distribution", "master_seed")}
    data["strategies"] = cfg["strategies"]
    data["profiles"] = env["profiles"]
    return _field("env.profiles", EnvConfig.from_dict, data)


def base_env_from(cfg: dict) -> EnvConfig:
    """EnvConfig carrying everything except calibrated profiles (placeholders)."""
    lib = library_from(cfg)
    env = cfg["env"]
    return _field(
        "env", EnvConfig,
        profiles=tuple(StrategyProfile() for _ in lib),
        feature_dim=int(env["feature_dim"]),
        informative_dims=int(env["informative_dims"]),
        feature_noise_sigma=float(env["feature_noise_sigma"]),
        difficulty_distribution=str(env["difficulty_distribution"]),
        master_seed=int(env["master_seed"]),
        library=lib,
    )


def ppo_from(cfg: dict) -> PPOConfig:
    return _field("ppo", PPOConfig.from_dict, cfg["ppo"])


def heuristic_from(cfg: dict, library: StrategyLibrary, threshold: float) -> HeuristicConfig:
    h = cfg["heuristic"]

    def action(v):
        return library.index(v) if isinstance(v, str) else int(v)

    return _field("heuristic", HeuristicConfig, float(threshold), int(h["feature_index"]),
                  action(h["low_action"]), action(h["high_action"]))


def validate(cfg: dict) -> None:
    for section in SECTIONS:
        if section not in cfg:
            raise ConfigError(f"missing section {section!r}")
    lib = library_from(cfg)
    base_env_from(cfg)
    targets_from(cfg)
    template_from(cfg)
    env_from(cfg)
    ppo_from(cfg)
    h = cfg["heuristic"]
    if not (0.0 < float(h["high_fraction"]) < 1.0):
        raise ConfigError("heuristic.high_fraction: must lie in (0, 1)")
    for key in ("low_action", "high_action"):
        v = h[key]
        if isinstance(v, str) and v not in lib.names:
            raise ConfigError(f"heuristic.{key}: unknown strategy {v!r}")
    ratios = cfg["sweep"]["ratios"]
    if not ratios or any(len(r) != 2 for r in ratios):
        raise ConfigError("sweep.ratios: need a nonempty list of [alpha, beta] pairs")
    if int(cfg["eval"]["n_queries"]) < 1:
        raise ConfigError("eval.n_queries: must be >= 1")


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None, width=120)
