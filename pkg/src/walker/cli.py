"""Command-line entry point: ``walker config init | train | eval | compare | plot``."""

from __future__ import annotations

import csv
import io
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .errors import (
    AperiodicGait,
    CheckpointMismatch,
    ConfigurationError,
    ContractViolation,
    InsufficientData,
    SimulationBlowUp,
    TrainingDivergence,
)
from .evaluation import METRIC_NAMES, evaluate_to_dir, write_json
from .nn import _atomic_write
from .plotting import plot_csv
from .trainer import read_log, thread_limit, train_run

HANDLED = (
    AperiodicGait,
    CheckpointMismatch,
    ConfigurationError,
    ContractViolation,
    InsufficientData,
    SimulationBlowUp,
    TrainingDivergence,
    FileExistsError,
    FileNotFoundError,
    PermissionError,
    IsADirectoryError,
    NotADirectoryError,
)


class RunLocked(RuntimeError):
    pass


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive ownership of a run directory for the lifetime of a command."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{run_dir} is in use by another process (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_config(path: Path, cfg: RunConfig, force: bool = False) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} already exists; pass --force to overwrite")
    if path.parent and not path.parent.exists():
        raise FileNotFoundError(f"directory {path.parent} does not exist")
    _atomic_write(path, cfg.to_json().encode("utf-8"))


def train_config(cfg: RunConfig, deterministic: bool = False, run_dir: Optional[Path] = None,
                 progress=None) -> Path:
    run_dir = Path(run_dir) if run_dir is not None else cfg.run_dir
    with run_lock(run_dir):
        _atomic_write(run_dir / "config.json", cfg.to_json().encode("utf-8"))
        train_run(cfg, run_dir, deterministic, progress)
    return run_dir


def evaluate_checkpoint(ckpt: Path, episodes: int, seed: Optional[int] = None, out_dir: Optional[Path] = None,
                        expected: Optional[RunConfig] = None) -> dict:
    ckpt = Path(ckpt)
    cfg, roster, nets, manifest = load_checkpoint(ckpt, expected)
    run_dir = ckpt.parent.parent
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "eval"
    log = run_dir / "train_log.csv"
    curve = read_log(log)["mean_reward"] if log.exists() else None
    seed = cfg.seed if seed is None else seed
    report = evaluate_to_dir(cfg, roster, nets, out_dir, episodes, seed, curve)
    report["checkpoint"] = str(ckpt)
    report["iteration"] = manifest.get("iteration")
    write_json(out_dir / "metrics.json", report)
    return report


PROTOCOL_KEYS = ("mode", "morphology", "reward", "randomization", "commands", "sim", "evaluation")
BUDGET_KEYS = ("iterations", "n_envs", "horizon")


def check_protocol(a: RunConfig, b: RunConfig) -> None:
    da, db = a.to_dict(), b.to_dict()
    for k in PROTOCOL_KEYS:
        if da[k] != db[k]:
            raise ConfigurationError(f"configs differ in {k!r}; a comparison needs the same protocol")
    for k in BUDGET_KEYS:
        if da["trainer"][k] != db["trainer"][k]:
            raise ConfigurationError(f"configs differ in training budget field {k!r}")


def compare_configs(a: RunConfig, b: RunConfig, seeds: Sequence[int], out_dir: Path,
                    episodes: Optional[int] = None, progress=None) -> dict:
    """Train and evaluate both configurations on every seed (deterministic mode)."""
    check_protocol(a, b)
    labels = [a.name, b.name] if a.name != b.name else [f"{a.name}-a", f"{b.name}-b"]
    out_dir = Path(out_dir)
    results: Dict[str, List[dict]] = {labels[0]: [], labels[1]: []}
    curves = []
    for label, cfg in zip(labels, (a, b)):
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed), name=f"{label}_seed{seed}", output_dir=str(out_dir))
            run_dir = train_config(run_cfg, deterministic=True, progress=progress)
            n_ep = episodes if episodes is not None else run_cfg.evaluation.episodes
            report = evaluate_checkpoint(run_dir / "checkpoints" / "final.bin", n_ep, seed)
            results[label].append(report)
            log = read_log(run_dir / "train_log.csv")
            for it, r in zip(log["iteration"], log["mean_reward"]):
                curves.append((label, int(seed), int(it), float(r)))
    summary = {"seeds": [int(s) for s in seeds], "methods": {}}
    for label in labels:
        reps = results[label]
        summary["methods"][label] = {
            "algorithm": (a if label == labels[0] else b).algorithm,
            "metrics": {m: _mean_or_none([r["metrics"][m] for r in reps]) for m in METRIC_NAMES},
            "mean_displacement": float(np.mean([r["mean_displacement"] for r in reps])),
            "fall_rate": float(np.mean([r["fall_rate"] for r in reps])),
        }
    summary["table"] = comparison_table(summary, labels)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "iteration", "mean_reward"])
    for label, seed, it, r in curves:
        w.writerow([label, seed, it, repr(r)])
    _atomic_write(out_dir / "reward_curves.csv", buf.getvalue().encode("utf-8"))
    _atomic_write(out_dir / "comparison.md", summary["table"].encode("utf-8"))
    write_json(out_dir / "comparison.json", summary)
    return summary


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


METRIC_TITLES = {
    "t_conv": "T_Conv (iterations)",
    "s_action": "S_action",
    "s_torso": "S_torso",
    "c_limb": "C_limb (rad)",
}


def comparison_table(summary: dict, labels: Sequence[str]) -> str:
    """Markdown table, one row per metric; the lower (better) value is bold."""
    lines = ["| Metric | " + " | ".join(labels) + " |", "|---|" + "---|" * len(labels)]
    for m in METRIC_NAMES:
        vals = [summary["methods"][l]["metrics"][m] for l in labels]
        finite = [v for v in vals if v is not None]
        best = min(finite) if finite else None
        cells = []
        for v in vals:
            if v is None:
                cells.append("n/a")
            else:
                text = f"{v:.4g}"
                cells.append(f"**{text}**" if v == best and len(set(finite)) > 1 else text)
        lines.append(f"| {METRIC_TITLES[m]} | " + " | ".join(cells) + " |")
    seeds = ", ".join(str(s) for s in summary["seeds"])
    lines.append("")
    lines.append(f"Means over seeds {{{seeds}}}; lower is better for every metric.")
    return "\n".join(lines) + "\n"


def parse_seeds(text: Optional[str]) -> List[int]:
    if text is None or not text.strip():
        return [0, 1, 2]
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise click.BadParameter(f"seeds must be a comma-separated integer list, got {text!r}") from None
    if not seeds:
        raise click.BadParameter("empty seed list")
    return seeds


# ---------------------------------------------------------------------------
# click surface


def _fail(exc: Exception):
    raise click.ClickException(f"{type(exc).__name__}: {exc}")


@click.group()
def main():
    """Multi-agent PPO locomotion for a planar articulated walker."""


@main.group()
def config():
    """Run configuration files."""


@config.command("init")
@click.argument("path", default="walker.json", type=click.Path(dir_okay=False))
@click.option("--force", is_flag=True, help="Overwrite an existing file.")
@click.option("--mode", type=click.Choice(["bipedal", "arm-swing"]), default="bipedal")
@click.option("--algorithm", type=click.Choice(["mash", "single-agent-ppo"]), default="mash")
@click.option("--name", default=None, help="Run name (default: derived from algorithm and mode).")
def config_init(path, force, mode, algorithm, name):
    """Write a default configuration to PATH."""
    try:
        cfg = RunConfig(mode=mode, algorithm=algorithm, name=name or f"{algorithm}-{mode}")
        write_config(Path(path), cfg, force)
    except (*HANDLED, OSError) as exc:
        _fail(exc)
    click.echo(f"wrote {path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--deterministic", is_flag=True, help="Single-threaded, bit-reproducible run.")
@click.option("--quiet", is_flag=True)
def train(config_path, seed, deterministic, quiet):
    """Train the configured algorithm; writes runs/<name>/."""
    try:
        cfg = RunConfig.load(config_path)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
            cfg.validate()
        def progress(row):
            if not quiet and (row["iteration"] % 10 == 0 or row["iteration"] == cfg.trainer.iterations):
                click.echo(
                    f"iter {row['iteration']:5d}  reward {row['mean_reward']:9.3f}  "
                    f"disp {row['displacement']:7.3f}  falls {row['falls']}"
                )
        run_dir = train_config(cfg, deterministic, progress=progress)
    except (*HANDLED, RunLocked, OSError) as exc:
        _fail(exc)
    click.echo(f"run directory: {run_dir}")


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--episodes", type=int, default=None, help="Number of evaluation episodes.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Refuse the checkpoint unless it matches this configuration.")
def eval_cmd(ckpt, episodes, seed, out_dir, config_path):
    """Evaluate a checkpoint with its mean action; writes metrics.json and trajectories.csv."""
    try:
        expected = RunConfig.load(config_path) if config_path else None
        if episodes is None:
            episodes = (expected or load_checkpoint(ckpt)[0]).evaluation.episodes
        if episodes < 1:
            raise ConfigurationError("--episodes must be >= 1")
        with thread_limit(False):
            report = evaluate_checkpoint(Path(ckpt), episodes, seed, out_dir, expected)
    except (*HANDLED, OSError) as exc:
        _fail(exc)
    click.echo(json.dumps(report["metrics"], indent=2, sort_keys=True))


@main.command()
@click.option("--a", "config_a", required=True, type=click.Path(dir_okay=False))
@click.option("--b", "config_b", required=True, type=click.Path(dir_okay=False))
@click.option("--seeds", default=None, help="Comma-separated seeds (default 0,1,2).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/compare")
@click.option("--episodes", type=int, default=None)
def compare(config_a, config_b, seeds, out_dir, episodes):
    """Train and evaluate two configurations over several seeds and tabulate the metrics."""
    seed_list = parse_seeds(seeds)
    try:
        a, b = RunConfig.load(config_a), RunConfig.load(config_b)
        with thread_limit(True):
            summary = compare_configs(a, b, seed_list, Path(out_dir), episodes)
    except (*HANDLED, RunLocked, OSError) as exc:
        _fail(exc)
    click.echo(summary["table"])


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def plot(input_path, out_path):
    """Render a reward log or trajectory CSV as SVG."""
    try:
        kind = plot_csv(input_path, out_path)
    except (*HANDLED, OSError, ValueError, KeyError) as exc:
        _fail(exc)
    click.echo(f"wrote {kind} plot to {out_path}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
