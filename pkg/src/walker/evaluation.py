"""Policy evaluation: fixed-command episodes, trajectory dumps and the four locomotion metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import RunConfig
from .domain_rand import RandomizationTable
from .errors import AperiodicGait, InsufficientData
from .metrics import (
    GaitPhaseSeries,
    RewardCurve,
    action_smoothness,
    convergence_time,
    extract_phase,
    limb_coordination,
    quadrature_phase,
    torso_stability,
)
from .morphology import MorphologyConfig
from .nn import _atomic_write
from .ppo import AgentRoster, Networks, act, gather_group_inputs
from .rewards import TERMS, reference_joint_positions
from .vecenv import VecWalkerEnv

POLICIES = ("mean", "random", "zero")
METRIC_NAMES = ("t_conv", "s_action", "s_torso", "c_limb")


def joint_names(morph: MorphologyConfig) -> List[str]:
    return [f"{limb.name}.{j.name}" for limb, j in morph.joints()]


def trajectory_columns(morph: MorphologyConfig) -> List[str]:
    names = joint_names(morph)
    return (
        ["episode", "step", "t"]
        + [f"q.{n}" for n in names]
        + [f"qd.{n}" for n in names]
        + [f"q_ref.{n}" for n in names]
        + [f"action.{n}" for n in names]
        + ["torso_x", "torso_z", "torso_pitch", "contact.left", "contact.right", "reward"]
        + [f"reward.{k}" for k in TERMS]
    )


def hip_index(morph: MorphologyConfig) -> List[int]:
    """Joint index of the first pitch-like hip joint of each leg (left, right)."""
    out = []
    slices = morph.joint_slices()
    for limb in morph.legs_ordered:
        names = [j.name for j in limb.joints]
        pick = next((i for i, n in enumerate(names) if n in ("hip", "hip_pitch")), 0)
        out.append(slices[limb.name].start + pick)
    return out


@dataclass
class Episode:
    times: np.ndarray  # (T,)
    q: np.ndarray  # (T, D)
    qd: np.ndarray
    q_ref: np.ndarray  # (T, D) absolute reference angles
    actions: np.ndarray  # (T, D)
    torso: np.ndarray  # (T, 3) x, z, pitch
    contacts: np.ndarray  # (T, 2)
    rewards: np.ndarray  # (T,)
    terms: Dict[str, np.ndarray]
    start_x: float
    fell: bool

    @property
    def length(self) -> int:
        return self.times.shape[0]

    @property
    def displacement(self) -> float:
        return float(self.torso[-1, 0] - self.start_x) if self.length else 0.0


def run_episodes(cfg: RunConfig, roster: AgentRoster, nets: Optional[Networks], episodes: int, seed: int,
                 policy: str = "mean", steps: Optional[int] = None) -> List[Episode]:
    """Run ``episodes`` parallel episodes under the evaluation command.

    ``policy``: ``mean`` (deterministic actor output), ``random`` (unit
    Gaussian actions on the roster's joints) or ``zero`` (hold the default
    posture). An episode ends at a fall or after ``steps`` control steps.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    if policy == "mean" and nets is None:
        raise ValueError("the mean policy needs networks")
    morph = cfg.morph()
    ec = cfg.evaluation
    steps = ec.episode_steps if steps is None else steps
    seq = np.random.SeedSequence([seed, ec.seed_offset])
    env_seq, act_seq = seq.spawn(2)
    table = cfg.randomization if ec.randomize else RandomizationTable.disabled()
    env = VecWalkerEnv(
        morph,
        episodes,
        [np.random.default_rng(s) for s in env_seq.spawn(episodes)],
        table=table,
        reward_cfg=cfg.reward,
        sim_params=cfg.sim,
        auto_reset=False,
        fixed_command=np.asarray(ec.command, dtype=float),
    )
    rng = np.random.default_rng(act_seq)
    env.reset()
    start_x = env.state.torso_x.copy()
    E, D = episodes, morph.dof_total
    alive = np.ones(E, dtype=bool)
    length = np.zeros(E, dtype=int)
    fell = np.zeros(E, dtype=bool)
    rec = {k: [] for k in ("t", "q", "qd", "q_ref", "a", "torso", "contact", "r")}
    terms: Dict[str, list] = {k: [] for k in TERMS}
    active = np.concatenate([g.joint_index for g in roster.groups])
    for _ in range(steps):
        if policy == "mean":
            _, _, full = act(roster, nets, gather_group_inputs(env, roster), None, deterministic=True)
        elif policy == "random":
            full = np.zeros((E, D))
            full[:, active] = rng.standard_normal((E, active.size))
        else:
            full = np.zeros((E, D))
        res = env.step(full)
        snap = res.step_snapshot
        rec["t"].append(snap.t_prev)
        rec["q"].append(snap.q)
        rec["qd"].append(snap.qd)
        rec["q_ref"].append(snap.q_default + reference_joint_positions(snap.t_prev, snap.commands, morph))
        rec["a"].append(full)
        rec["torso"].append(snap.torso_pos)
        rec["contact"].append(snap.foot_contact)
        rec["r"].append(res.reward.total)
        for k in TERMS:
            terms[k].append(res.reward.scaled[k])
        length += alive
        fell |= alive & res.done
        alive &= ~res.done
        if not alive.any():
            break
    stack = {k: np.stack(v, axis=1) for k, v in rec.items()}
    tstack = {k: np.stack(v, axis=1) for k, v in terms.items()}
    out = []
    for e in range(E):
        n = length[e]
        out.append(
            Episode(
                times=stack["t"][e, :n],
                q=stack["q"][e, :n],
                qd=stack["qd"][e, :n],
                q_ref=stack["q_ref"][e, :n],
                actions=stack["a"][e, :n],
                torso=stack["torso"][e, :n],
                contacts=stack["contact"][e, :n],
                rewards=stack["r"][e, :n],
                terms={k: v[e, :n] for k, v in tstack.items()},
                start_x=float(start_x[e]),
                fell=bool(fell[e]),
            )
        )
    return out


def limb_phases(ep: Episode, morph: MorphologyConfig, dt: float):
    """Left/right hip phases; falls back to the commanded gait frequency when the
    trajectory is too short or not periodic enough for a spectral estimate."""
    hl, hr = hip_index(morph)
    xl, xr = ep.q[:, hl], ep.q[:, hr]
    try:
        pl, f = extract_phase(xl, dt)
        pr, _ = extract_phase(xr, dt)
        return pl, pr, "spectral"
    except (AperiodicGait, InsufficientData):
        f = morph.gait_frequency
        return quadrature_phase(xl, f, dt), quadrature_phase(xr, f, dt), "commanded"


def episode_metrics(ep: Episode, morph: MorphologyConfig, roster: AgentRoster, dt: float, standing: bool) -> dict:
    active = np.concatenate([g.joint_index for g in roster.groups])
    out = {"length": ep.length, "fell": ep.fell, "displacement": ep.displacement,
           "mean_reward": float(ep.rewards.mean()) if ep.length else 0.0}
    if ep.length >= 2:
        out["s_action"] = action_smoothness(ep.actions[:, active])
        out["s_action_second_diff"] = action_smoothness(ep.actions[:, active], order=2) if ep.length >= 3 else None
        out["s_torso"] = torso_stability(ep.torso[:, 1], ep.torso[:, 2])
        pl, pr, source = limb_phases(ep, morph, dt)
        target = 0.0 if standing else np.pi
        out["c_limb"] = limb_coordination(GaitPhaseSeries(pl, pr, target))
        out["phase_source"] = source
    else:
        out.update(s_action=None, s_action_second_diff=None, s_torso=None, c_limb=None, phase_source=None)
    return out


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def t_conv_from_curve(rewards: np.ndarray, window: int = 51):
    """Convergence time, shrinking the smoothing window to the curve length if needed."""
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        return None, window
    w = window
    if rewards.size < w:
        w = rewards.size if rewards.size % 2 == 1 else rewards.size - 1
        w = max(w, 1)
    return convergence_time(RewardCurve(rewards, w)), w


def summarize(episodes: List[Episode], cfg: RunConfig, roster: AgentRoster,
              reward_curve: Optional[np.ndarray] = None) -> dict:
    morph = cfg.morph()
    dt = cfg.sim.control_dt
    standing = cfg.evaluation.command[0] > 0.5
    per = [episode_metrics(ep, morph, roster, dt, standing) for ep in episodes]
    report = {
        "episodes": len(episodes),
        "mode": cfg.mode,
        "algorithm": cfg.algorithm,
        "morphology": cfg.morphology,
        "command": list(cfg.evaluation.command),
        "mean_displacement": float(np.mean([p["displacement"] for p in per])),
        "mean_length": float(np.mean([p["length"] for p in per])),
        "fall_rate": float(np.mean([p["fell"] for p in per])),
        "metrics": {
            "s_action": _mean(p["s_action"] for p in per),
            "s_action_second_diff": _mean(p["s_action_second_diff"] for p in per),
            "s_torso": _mean(p["s_torso"] for p in per),
            "c_limb": _mean(p["c_limb"] for p in per),
            "t_conv": None,
        },
        "phase_source": sorted({p["phase_source"] for p in per if p["phase_source"]}),
        "per_episode": per,
    }
    if reward_curve is not None and len(reward_curve):
        t_conv, w = t_conv_from_curve(reward_curve)
        report["metrics"]["t_conv"] = t_conv
        report["t_conv_window"] = w
    return report


def write_trajectory_csv(path: Path, episodes: List[Episode], morph: MorphologyConfig, first: int = 0) -> None:
    cols = trajectory_columns(morph)
    lines = []
    for ei, ep in enumerate(episodes):
        for s in range(ep.length):
            row = [str(first + ei), str(s), repr(float(ep.times[s]))]
            row += [repr(float(v)) for v in ep.q[s]]
            row += [repr(float(v)) for v in ep.qd[s]]
            row += [repr(float(v)) for v in ep.q_ref[s]]
            row += [repr(float(v)) for v in ep.actions[s]]
            row += [repr(float(v)) for v in ep.torso[s]]
            row += [str(int(c)) for c in ep.contacts[s]]
            row += [repr(float(ep.rewards[s]))]
            row += [repr(float(ep.terms[k][s])) for k in TERMS]
            lines.append(row)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(lines)
    _atomic_write(Path(path), buf.getvalue().encode("utf-8"))


def write_json(path: Path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def evaluate_to_dir(cfg: RunConfig, roster: AgentRoster, nets: Networks, out_dir: Path, episodes: int,
                    seed: int, reward_curve: Optional[np.ndarray] = None, dump_episodes: int = 3) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eps = run_episodes(cfg, roster, nets, episodes, seed)
    report = summarize(eps, cfg, roster, reward_curve)
    report["seed"] = seed
    write_trajectory_csv(out_dir / "trajectories.csv", eps[:dump_episodes], cfg.morph())
    write_json(out_dir / "metrics.json", report)
    return report
