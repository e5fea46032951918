"""Command-line entry point: ``promptpolicy <command> [options]``.

Commands: calibrate, train, eval, baseline, sweep, dump-profiles, replay.
Exit codes: 0 ok, 1 usage, 2 config, 3 divergence, 4 backend transport.
"""

from __future__ import annotations

import argparse
import copy
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .backend import TransportError
from .baselines import fixed_policy, heuristic_policy, tune_threshold
from .config import (
    ConfigError,
    base_env_from,
    dump_config,
    env_from,
    heuristic_from,
    load_config,
    ppo_from,
    targets_from,
    template_from,
    validate,
)
from .domain import DomainError
from .evaluation import GreedyPolicy, SampledPolicy, evaluate, pareto_filter, pareto_sweep, results_table
from .policynet import load_checkpoint, save_checkpoint
from .ppo import TrainingDivergence, train
from .synthenv import TRAIN_STREAM, CalibrationError, SyntheticEnvironment, calibrate

log = logging.getLogger("promptpolicy")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_TRANSPORT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


# ---------------------------------------------------------------- run artifacts


def run_id_for(command: str, cfg: dict, params: dict) -> str:
    blob = json.dumps({"command": command, "config": cfg, "params": params}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class Run:
    """One output directory: manifest, config snapshot and outputs, all tagged with the run id."""

    def __init__(self, out_dir: str | Path, command: str, cfg: dict, params: dict):
        self.command = command
        self.cfg = cfg
        self.params = params
        self.run_id = run_id_for(command, cfg, params)
        self.dir = Path(out_dir) / f"{command}-{self.run_id}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, str] = {}
        self.manifest = {
            "run_id": self.run_id,
            "command": command,
            "params": params,
            "code_version": __version__,
            "master_seed": cfg["ppo"]["seed"],
            "env_master_seed": cfg["env"]["master_seed"],
            "started_at": dt.datetime.now(dt.timezone.utc).isoformat(),
            "finished_at": None,
            "status": "running",
            "outputs": self.outputs,
            "config": cfg,
        }
        (self.dir / "config.yaml").write_text(f"# run_id: {self.run_id}\n" + dump_config(cfg))
        self.outputs["config"] = "config.yaml"
        self._write_manifest()

    def path(self, name: str) -> Path:
        self.outputs[name.split(".")[0]] = name
        return self.dir / name

    def _write_manifest(self):
        (self.dir / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str = "ok"):
        self.manifest["status"] = status
        self.manifest["finished_at"] = dt.datetime.now(dt.timezone.utc).isoformat()
        self._write_manifest()


# ---------------------------------------------------------------- helpers


def resolved_env(cfg: dict):
    env = env_from(cfg)
    if env is None:
        log.info("env.profiles not set; calibrating in memory")
        env, _ = calibrate(targets_from(cfg), template_from(cfg), base_env_from(cfg))
    return env


def _apply_overrides(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    ppo = cfg["ppo"]
    if getattr(args, "alpha", None) is not None:
        ppo["reward_params"]["alpha"] = args.alpha
    if getattr(args, "beta", None) is not None:
        ppo["reward_params"]["beta"] = args.beta
    for flag, key in (("episodes", "episodes"), ("seed", "seed"), ("batch_size", "batch_size")):
        if getattr(args, flag, None) is not None:
            ppo[key] = getattr(args, flag)
    if getattr(args, "eval_queries", None) is not None:
        cfg["eval"]["n_queries"] = args.eval_queries
    if getattr(args, "eval_seed", None) is not None:
        cfg["eval"]["eval_seed"] = args.eval_seed
    if getattr(args, "workers", None) is not None:
        cfg["eval"]["workers"] = args.workers
        cfg["sweep"]["workers"] = args.workers
    if getattr(args, "ratios", None):
        cfg["sweep"]["ratios"] = args.ratios
    validate(cfg)
    return cfg


def _parse_ratios(text: str) -> list[list[float]]:
    try:
        return [[float(x) for x in part.split(":")] for part in text.split(",") if part]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"ratios must look like 0:1,10:1 ({exc})") from exc


def _eval_kwargs(cfg: dict) -> dict:
    e = cfg["eval"]
    return {"n_queries": int(e["n_queries"]), "eval_seed": int(e["eval_seed"]), "workers": int(e["workers"])}


# ---------------------------------------------------------------- commands


def cmd_calibrate(cfg: dict, args) -> int:
    env, report = calibrate(targets_from(cfg), template_from(cfg), base_env_from(cfg))
    out = copy.deepcopy(cfg)
    out["env"]["profiles"] = env.to_dict()["profiles"]
    lines = ["strategy\tthreshold\ttarget_accuracy\tachieved_accuracy\tresidual\tmean_cost\tsource"]
    for r in report.rows:
        lines.append(
            f"{r['strategy']}\t{r['threshold']:.10f}\t{r['target_accuracy']:.4f}\t{r['achieved_accuracy']:.10f}\t"
            f"{r['achieved_accuracy'] - r['target_accuracy']:.2e}\t{r['mean_cost']:.4f}\t{r['source']}"
        )
    report_text = "\n".join(lines) + "\n"
    output = Path(args.output)
    output.write_text(dump_config(out))
    output.with_suffix(".report.tsv").write_text(report_text)
    sys.stdout.write(report_text)
    return EXIT_OK


def cmd_dump_profiles(cfg: dict, args) -> int:
    env = resolved_env(cfg)
    sys.stdout.write("strategy\tfloor\tceiling\tthreshold\tsharpness\tmean_cost\tcost_noise_scale\n")
    for s, p in zip(env.library, env.profiles):
        sys.stdout.write(
            f"{s.name}\t{p.floor:.4f}\t{p.ceiling:.4f}\t{p.threshold:.6f}\t{p.sharpness:.3f}\t"
            f"{p.mean_cost:.4f}\t{p.cost_noise_scale:.4f}\n"
        )
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    env = resolved_env(cfg)
    ppo = ppo_from(cfg)
    run = Run(args.out_dir, "train", cfg, {})
    log_path = run.path("episodes.jsonl")
    ckpt_path = run.path("checkpoint.npz")
    with open(log_path, "w") as fh:

        def emit(rec):
            fh.write(_json_line({"run_id": run.run_id, **rec}))

        try:
            result = train(SyntheticEnvironment(env, stream=TRAIN_STREAM), ppo, on_episode=emit)
        except TrainingDivergence as exc:
            save_checkpoint(ckpt_path, exc.net, extra={"run_id": run.run_id, "status": "diverged"})
            run.finish("diverged")
            print(f"training diverged: {exc}; last good checkpoint at {ckpt_path}", file=sys.stderr)
            return EXIT_DIVERGENCE
        save_checkpoint(ckpt_path, result.net, result.opt_state,
                        extra={"run_id": run.run_id, "reward_params": cfg["ppo"]["reward_params"]})
        label = "PPN (alpha={alpha:g}, beta={beta:g})".format(**cfg["ppo"]["reward_params"])
        metrics = evaluate(GreedyPolicy(result.net, label), env, **_eval_kwargs(cfg))
        fh.write(_json_line({"run_id": run.run_id, "event": "final_eval", **metrics.to_dict()}))
    table = results_table([metrics], env.library.names, run.run_id)
    run.path("results.tsv").write_text(table)
    run.finish()
    sys.stdout.write(table)
    print(f"run directory: {run.dir}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    env = resolved_env(cfg)
    if ckpt.net.feature_dim != env.feature_dim or ckpt.net.n_actions != env.n_actions:
        raise UsageError(
            f"checkpoint shape (D={ckpt.net.feature_dim}, N={ckpt.net.n_actions}) does not match the "
            f"environment (D={env.feature_dim}, N={env.n_actions})"
        )
    sampled = args.sampled or cfg["eval"]["sampled"]
    policy = SampledPolicy(ckpt.net, int(cfg["eval"]["eval_seed"]), f"PPN sampled [{path.name}]") if sampled \
        else GreedyPolicy(ckpt.net, f"PPN [{path.name}]")
    run = Run(args.out_dir, "eval", cfg, {"checkpoint": str(path), "sampled": bool(sampled)})
    metrics = evaluate(policy, env, **_eval_kwargs(cfg))
    table = results_table([metrics], env.library.names, run.run_id)
    run.path("results.tsv").write_text(table)
    run.finish()
    sys.stdout.write(table)
    return EXIT_OK


def baseline_metrics(cfg: dict, env, names: list[str]):
    rows = []
    for name in names:
        if name.lower() == "heuristic":
            h = cfg["heuristic"]
            threshold = h["threshold"]
            probe = heuristic_from(cfg, env.library, 0.0)
            if threshold is None:
                threshold = tune_threshold(env, probe, float(h["high_fraction"]))
            policy = heuristic_policy(heuristic_from(cfg, env.library, threshold), env)
        else:
            policy = fixed_policy(name, env.library)
        rows.append(evaluate(policy, env, **_eval_kwargs(cfg)))
    return rows


def cmd_baseline(cfg: dict, args) -> int:
    env = resolved_env(cfg)
    if args.all:
        names = ["ZS", "CoT", "SC", "heuristic"]
    elif args.policy:
        names = list(args.policy)
    else:
        raise UsageError("baseline needs --all or at least one --policy")
    for n in names:
        if n.lower() != "heuristic" and n not in env.library.names:
            raise UsageError(f"unknown baseline {n!r}; choose from {env.library.names + ['heuristic']}")
    run = Run(args.out_dir, "baseline", cfg, {"policies": names})
    rows = baseline_metrics(cfg, env, names)
    table = results_table(rows, env.library.names, run.run_id)
    run.path("results.tsv").write_text(table)
    run.finish()
    sys.stdout.write(table)
    return EXIT_OK


def cmd_sweep(cfg: dict, args) -> int:
    env = resolved_env(cfg)
    ratios = [tuple(r) for r in cfg["sweep"]["ratios"]]
    run = Run(args.out_dir, "sweep", cfg, {})
    ckpt_dir = run.dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    e = _eval_kwargs(cfg)
    points = pareto_sweep(
        env, ppo_from(cfg), ratios, master_seed=int(cfg["sweep"]["master_seed"]),
        n_eval=e["n_queries"], eval_seed=e["eval_seed"], workers=int(cfg["sweep"]["workers"]),
        checkpoint_dir=ckpt_dir,
    )
    front = {id(p) for p in pareto_filter(points)}
    with open(run.path("pareto.jsonl"), "w") as fh:
        for p in points:
            rec = {"run_id": run.run_id, **p.to_record(), "on_front": id(p) in front}
            if rec["checkpoint"]:
                rec["checkpoint"] = str(Path(rec["checkpoint"]).relative_to(run.dir))
            fh.write(_json_line(rec))
    table = results_table([p.metrics for p in points if p.metrics is not None], env.library.names, run.run_id)
    run.path("results.tsv").write_text(table)
    failed = [p for p in points if p.metrics is None]
    run.finish("partial" if failed else "ok")
    sys.stdout.write(table)
    return EXIT_DIVERGENCE if failed else EXIT_OK


def cmd_replay(cfg_unused, args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    cfg = manifest["config"]
    validate(cfg)
    ns = argparse.Namespace(out_dir=args.out_dir, **manifest["params"])
    command = manifest["command"]
    if command == "baseline":
        ns.all, ns.policy = False, manifest["params"]["policies"]
    return COMMANDS[command](cfg, ns)


COMMANDS = {
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "sweep": cmd_sweep,
    "dump-profiles": cmd_dump_profiles,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptpolicy", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("-c", "--config", help="YAML config (defaults are used for missing fields)")
        if out:
            sp.add_argument("--out-dir", default="runs", help="parent directory for run outputs")
        return sp

    def eval_flags(sp):
        sp.add_argument("--eval-queries", type=int)
        sp.add_argument("--eval-seed", type=int)
        sp.add_argument("--workers", type=int)

    sp = common(sub.add_parser("calibrate", help="fit environment profiles to accuracy targets"), out=False)
    sp.add_argument("-o", "--output", default="calibrated.yaml")

    common(sub.add_parser("dump-profiles", help="print calibrated profile table"), out=False)

    sp = common(sub.add_parser("train", help="train one PPN with PPO"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch-size", type=int)
    eval_flags(sp)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sampled", action="store_true", help="sample actions instead of argmax")
    eval_flags(sp)

    sp = common(sub.add_parser("baseline", help="evaluate fixed and heuristic baselines"))
    sp.add_argument("--all", action="store_true", help="Fixed ZS, CoT, SC and the heuristic")
    sp.add_argument("--policy", action="append", help="strategy name or 'heuristic' (repeatable)")
    eval_flags(sp)

    sp = common(sub.add_parser("sweep", help="alpha/beta Pareto sweep"))
    sp.add_argument("--ratios", type=_parse_ratios, help="comma-separated alpha:beta pairs, e.g. 0:1,10:1")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--batch-size", type=int)
    eval_flags(sp)

    sp = sub.add_parser("replay", help="re-run a command from its manifest.json")
    sp.add_argument("manifest")
    sp.add_argument("--out-dir", default="runs")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.command != "replay":
            cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"promptpolicy: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CalibrationError, DomainError) as exc:
        print(f"promptpolicy: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"promptpolicy: backend error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
