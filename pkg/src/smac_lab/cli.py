"""Command-line entry point: ``train``, ``eval``, ``probe-bias`` and ``ablate``.

Every training run gets its own directory::

    <out>/<name>/manifest.json        config snapshot, seed, config hash, timestamps
    <out>/<name>/metrics.csv          per-episode and windowed training metrics
    <out>/<name>/checkpoints/step_<n>.ckpt
    <out>/<name>/reports/             eval / bias outputs written by later subcommands

Existing run directories are never overwritten; a numeric suffix is added instead.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .agent.trainer import DivergenceError, TrainResult, load_checkpoint, save_checkpoint, train
from .config import ConfigError, RunConfig
from .envs import make_env
from .probes import ProbeProtocol, bias_curve, bias_sample, evaluate, write_bias_csv

log = logging.getLogger("smac_lab")

DEFAULT_OUT = "runs"
EXIT_DIVERGED = 3
EXIT_FILE = 4

ABLATION_VARIANTS = {
    "smac": {},
    "sac_lag": {"disable_modulator": True},
    "sac": {"disable_modulator": True, "lambda_fixed": 0.0},
}
SUMMARY_COLUMNS = ("variant", "seed", "mean_return", "mean_cost", "terminal_bias")


class UsageError(Exception):
    """Bad command-line input; reported with exit code 2."""


# ---------------------------------------------------------------- helpers


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("SMAC_LAB_OUT") or DEFAULT_OUT)


def resolve_config(config_path: str | None, profile: str | None, overrides: list[str], seed: int | None) -> RunConfig:
    if config_path and profile:
        raise UsageError("--config and --profile are mutually exclusive")
    config = cfgmod.load(config_path) if config_path else cfgmod.load_profile(profile or "full")
    config = cfgmod.apply_overrides(config, overrides or [])
    if seed is not None:
        config = replace(config, agent=replace(config.agent, seed=seed))
    return config


def fresh_dir(root: Path, name: str) -> Path:
    """``root/name``, or ``root/name-<k>`` for the first k that does not exist yet."""
    root.mkdir(parents=True, exist_ok=True)
    candidate, k = root / name, 1
    while candidate.exists():
        candidate, k = root / f"{name}-{k}", k + 1
    candidate.mkdir()
    return candidate


def run_name(config: RunConfig) -> str:
    return f"{config.env_name}_s{config.agent.seed}_{config.content_hash()[:10]}"


def write_manifest(run_dir: Path, config: RunConfig, **extra) -> dict:
    manifest = {
        "config": config.to_dict(),
        "seed": config.agent.seed,
        "config_hash": config.content_hash(),
        "layout": {"metrics": "metrics.csv", "checkpoints": "checkpoints/step_<n>.ckpt", "reports": "reports/"},
        **extra,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(run_dir: Path) -> tuple[dict, RunConfig]:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    manifest = json.loads(path.read_text())
    return manifest, cfgmod.from_dict(manifest["config"])


def checkpoints(run_dir: Path) -> list[Path]:
    found = (run_dir / "checkpoints").glob("step_*.ckpt")
    return sorted(found, key=lambda p: int(p.stem.split("_")[1]))


def run_training(config: RunConfig, run_dir: Path) -> TrainResult:
    """Train into ``run_dir``; the manifest records status and timestamps, a final checkpoint is always saved."""
    (run_dir / "reports").mkdir(exist_ok=True)
    started = _now()
    write_manifest(run_dir, config, started=started, finished=None, status="running")
    env = make_env(config.env_name, **config.env)
    status = "failed"
    try:
        result = train(config.agent, env, run_dir)
        final = run_dir / "checkpoints" / f"step_{config.agent.total_steps}.ckpt"
        if not final.exists():
            result.checkpoints.append(save_checkpoint(result.networks, result.lagrange, config.agent.total_steps, final))
        status = "completed"
        return result
    except DivergenceError:
        status = "diverged"
        raise
    finally:
        write_manifest(run_dir, config, started=started, finished=_now(), status=status)


def _protocol(config: RunConfig, seed: int = 0) -> ProbeProtocol:
    p = config.probe
    return ProbeProtocol(gamma=config.agent.gamma, n_rollouts=p.n_rollouts, tolerance=p.tolerance,
                         episodes=p.probe_episodes, probe_step=p.probe_step, seed=seed,
                         disable_modulator=config.agent.disable_modulator)


def final_window(episodes: list[dict], n: int = 10) -> tuple[float, float]:
    """Mean return and episode cost over the last ``n`` training episodes."""
    tail = episodes[-n:]
    if not tail:
        return float("nan"), float("nan")
    return float(np.mean([e["return"] for e in tail])), float(np.mean([e["episode_cost"] for e in tail]))


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.profile, args.set, args.seed)
    run_dir = fresh_dir(out_root(args.out), run_name(config))
    print(run_dir)
    try:
        result = run_training(config, run_dir)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ret, cost = final_window(result.episodes)
    print(f"episodes {len(result.episodes)}  final-10 return {ret:.4f}  cost {cost:.2f}  lambda {result.lagrange.lam:.4f}")
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    run_dir = Path(args.run_dir)
    _, config = read_manifest(run_dir)
    path = Path(args.checkpoint) if args.checkpoint else (checkpoints(run_dir) or [None])[-1]
    if path is None or not path.exists():
        raise FileNotFoundError(f"no checkpoint found for {run_dir}")
    nets, meta = load_checkpoint(path)
    env = make_env(config.env_name, **config.env)
    report = evaluate(nets, env, args.episodes, args.seed, config.agent.disable_modulator)
    payload = {"checkpoint": path.name, "step": int(meta["step"]), "seed": args.seed, **report.to_dict()}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    reports = run_dir / "reports"
    reports.mkdir(exist_ok=True)
    (reports / f"eval_{path.stem}_seed{args.seed}.json").write_text(text)
    print(text, end="")
    return 0


def cmd_probe_bias(args) -> int:
    run_dir = Path(args.run_dir)
    _, config = read_manifest(run_dir)
    found = checkpoints(run_dir)
    if len(found) < 2:
        raise UsageError(f"probe-bias needs at least 2 checkpoints, {run_dir} has {len(found)}")
    env = make_env(config.env_name, **config.env)
    samples = bias_curve(found, env, _protocol(config, args.seed))
    reports = run_dir / "reports"
    reports.mkdir(exist_ok=True)
    out = reports / "bias.csv"
    write_bias_csv(samples, out)
    for s in samples:
        print(f"step {s.step:>9d}  estimated {s.estimated_q:+.5f}  true {s.true_q:+.5f}  bias {s.bias:+.5f}")
    print(out)
    return 0


def cmd_ablate(args) -> int:
    base = resolve_config(args.config, args.profile, args.set, None)
    root = fresh_dir(out_root(args.out), f"ablate_{base.env_name}_{base.content_hash()[:10]}")
    seeds = list(range(args.seed or 0, (args.seed or 0) + args.seeds))
    rows = []
    for variant, flags in ABLATION_VARIANTS.items():
        for seed in seeds:
            config = replace(base, agent=replace(base.agent, seed=seed, **flags))
            run_dir = fresh_dir(root, f"{variant}_s{seed}")
            t0 = time.time()
            try:
                result = run_training(config, run_dir)
            except DivergenceError as exc:
                print(f"{variant} seed {seed} diverged: {exc}", file=sys.stderr)
                return EXIT_DIVERGED
            ret, cost = final_window(result.episodes)
            env = make_env(config.env_name, **config.env)
            bias = bias_sample(result.networks, env, config.agent.total_steps, _protocol(config)).bias
            rows.append({"variant": variant, "seed": seed, "mean_return": ret, "mean_cost": cost,
                         "terminal_bias": bias})
            print(f"{variant:8s} seed {seed}  return {ret:+.4f}  cost {cost:7.2f}  bias {bias:+.5f}  "
                  f"({time.time() - t0:.0f}s)")
    for variant in ABLATION_VARIANTS:
        sub = [r for r in rows if r["variant"] == variant]
        rows.append({"variant": variant, "seed": "mean",
                     **{k: float(np.mean([r[k] for r in sub])) for k in SUMMARY_COLUMNS[2:]}})
    out = root / "summary.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    print(out)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smac-lab", description="Safety-modulated actor-critic lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="JSON run config (default: the shipped full-scale profile)")
        p.add_argument("--profile", choices=("full", "desk"), help="shipped profile instead of --config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable); VALUE is parsed as JSON")
        p.add_argument("--out", help=f"output root (default: $SMAC_LAB_OUT or ./{DEFAULT_OUT})")

    p = sub.add_parser("train", help="train one agent")
    config_flags(p)
    p.add_argument("--seed", type=int, help="overrides agent.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate the deterministic policy of a run")
    p.add_argument("run_dir")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="evaluation reset seed")
    p.add_argument("--checkpoint", help="checkpoint path (default: latest in the run)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-bias", help="overestimation bias of every checkpoint in a run")
    p.add_argument("run_dir")
    p.add_argument("--seed", type=int, default=0, help="probe episode seed")
    p.set_defaults(func=cmd_probe_bias)

    p = sub.add_parser("ablate", help="SMAC vs SAC-Lag and SAC analogs over several seeds")
    config_flags(p)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
