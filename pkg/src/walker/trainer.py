"""Training driver: builds environments and networks from a RunConfig and runs
collect/update iterations, logging one CSV row per iteration."""

from __future__ import annotations

import csv
import io
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .errors import ConfigurationError
from .ppo import (
    AgentRoster,
    Networks,
    UpdateStats,
    build_roster,
    collect_rollouts,
    finish_buffer,
    init_networks,
    init_optimizer,
    mappo_update,
)
from .vecenv import VecWalkerEnv

LOG_COLUMNS = [
    "iteration",
    "mean_reward",
    "displacement",
    "falls",
    "policy_loss",
    "value_loss",
    "entropy",
    "mean_ratio",
    "max_ratio",
    "first_ratio_dev",
    "clip_fraction",
    "approx_kl",
    "explained_variance",
    "actor_grad_norm",
    "critic_grad_norm",
    "wall_clock",
]


@contextmanager
def thread_limit(deterministic: bool):
    """Cap BLAS threads: one in deterministic mode, ``WALKER_THREADS`` otherwise."""
    from threadpoolctl import threadpool_limits

    env = os.environ.get("WALKER_THREADS")
    if deterministic:
        limit = 1
    elif env:
        try:
            limit = int(env)
        except ValueError:
            raise ConfigurationError(f"WALKER_THREADS must be an integer, got {env!r}") from None
        if limit < 1:
            raise ConfigurationError("WALKER_THREADS must be >= 1")
    else:
        limit = None
    if limit is None:
        yield
    else:
        with threadpool_limits(limits=limit):
            yield


class Trainer:
    """One training run; ``algorithm`` selects MAPPO or the single-agent baseline."""

    def __init__(self, cfg: RunConfig, deterministic: bool = False):
        self.cfg = cfg
        self.deterministic = deterministic
        tc = cfg.trainer
        self.morph = cfg.morph()
        self.roster: AgentRoster = build_roster(self.morph, cfg.mode, cfg.algorithm, tc.per_limb)
        env_seq, init_seq, policy_seq, obs_seq = np.random.SeedSequence(cfg.seed).spawn(4)
        env_rngs = [np.random.default_rng(s) for s in env_seq.spawn(tc.n_envs)]
        self.env = VecWalkerEnv(
            self.morph,
            tc.n_envs,
            env_rngs,
            table=cfg.randomization,
            reward_cfg=cfg.reward,
            commands=cfg.commands,
            sim_params=cfg.sim,
            obs_noise=tc.obs_noise,
        )
        self.env.obs_rng = np.random.default_rng(obs_seq)
        self.nets: Networks = init_networks(
            self.roster, self.env.critic_layout.width, tc, np.random.default_rng(init_seq)
        )
        self.opt = init_optimizer(self.nets, tc)
        self.rng = np.random.default_rng(policy_seq)
        self.iteration = 0
        self.rows: List[Dict[str, float]] = []
        self._t0 = time.perf_counter()

    def step(self) -> Dict[str, float]:
        tc = self.cfg.trainer
        buf = collect_rollouts(self.env, self.roster, self.nets, tc, self.rng)
        finish_buffer(buf, tc)
        stats: UpdateStats = mappo_update(buf, self.roster, self.nets, self.opt, tc, self.rng)
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "mean_reward": float(buf.rewards.sum(axis=0).mean()),
            "displacement": buf.displacement,
            "falls": buf.falls,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "mean_ratio": stats.mean_ratio,
            "max_ratio": stats.max_ratio,
            "first_ratio_dev": stats.first_ratio_dev,
            "clip_fraction": stats.clip_fraction,
            "approx_kl": stats.approx_kl,
            "explained_variance": stats.explained_variance,
            "actor_grad_norm": stats.actor_grad_norm,
            "critic_grad_norm": stats.critic_grad_norm,
            "wall_clock": 0.0 if self.deterministic else time.perf_counter() - self._t0,
        }
        self.rows.append(row)
        return row

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def save(self, path) -> dict:
        return save_checkpoint(path, self.cfg, self.roster, self.nets, self.iteration, self.rng_state())


def format_row(row: Dict[str, float]) -> List[str]:
    out = []
    for k in LOG_COLUMNS:
        v = row[k]
        out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
    return out


def append_log(path: Path, row: Dict[str, float]) -> None:
    new = not path.exists()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if new:
        w.writerow(LOG_COLUMNS)
    w.writerow(format_row(row))
    with open(path, "a", encoding="utf-8") as f:
        f.write(buf.getvalue())


def read_log(path) -> Dict[str, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {k: np.zeros(0) for k in LOG_COLUMNS}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def train_run(cfg: RunConfig, run_dir: Path, deterministic: bool = False,
              progress: Optional[Callable[[Dict[str, float]], None]] = None) -> Trainer:
    """Run the full iteration budget, writing the log and checkpoints under ``run_dir``.

    Periodic checkpoints are written every ``checkpoint_every`` iterations and
    a final one on completion; a divergence leaves the last good checkpoint in
    place and propagates.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    with thread_limit(deterministic):
        trainer = Trainer(cfg, deterministic)
        every = cfg.trainer.checkpoint_every
        for _ in range(cfg.trainer.iterations):
            row = trainer.step()
            append_log(log_path, row)
            if progress is not None:
                progress(row)
            if every > 0 and trainer.iteration % every == 0:
                trainer.save(ckpt_dir / f"iter_{trainer.iteration:06d}.bin")
        trainer.save(ckpt_dir / "final.bin")
    return trainer
