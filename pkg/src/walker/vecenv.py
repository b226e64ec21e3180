"""Batch of independent walker environments with randomization, rewards and auto-reset."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import List, Optional, Sequence

import numpy as np

from .domain_rand import (
    PhysicsOverrides,
    RandomizationTable,
    StepPerturbation,
    sample_init_randomization,
    sample_step_randomization,
)
from .morphology import MorphologyConfig
from .obs import (
    AgentId,
    CommandRanges,
    CriticLayout,
    ObservationLayout,
    build_agent_obs,
    build_critic_obs,
    sample_commands,
)
from .rewards import RewardBreakdown, RewardConfig, compute_reward_terms, reference_signals
from .sim import SimParams, StepSnapshot, WalkerModel, env_reset, env_step, reset_snapshot

# Snapshot fields that are per-model constants rather than per-environment rows.
_SHARED_FIELDS = {"tau_max", "q_default", "dt", "nominal_height"}


def merge_snapshots(base: StepSnapshot, other: StepSnapshot, mask: np.ndarray) -> StepSnapshot:
    """Rows of ``other`` where ``mask`` is set, rows of ``base`` elsewhere."""
    out = {}
    for f in fields(StepSnapshot):
        a, b = getattr(base, f.name), getattr(other, f.name)
        if f.name in _SHARED_FIELDS:
            out[f.name] = a
        else:
            m = mask.reshape(mask.shape + (1,) * (np.ndim(a) - 1))
            out[f.name] = np.where(m, b, a)
    return StepSnapshot(**out)


def spawn_rngs(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class StepResult:
    reward: RewardBreakdown
    done: np.ndarray  # (E,) bool, episode ended by a fall
    step_snapshot: StepSnapshot  # the transition's own snapshot, before any reset
    displacement: np.ndarray  # (E,) torso x travel of the episode that just ended (0 if none)


class VecWalkerEnv:
    """``n_envs`` walkers stepped in lockstep; each owns one rng stream.

    A fallen environment is reset in place; the observation snapshot then
    describes the fresh episode while ``StepResult`` keeps the final
    transition.
    """

    def __init__(
        self,
        morph: MorphologyConfig,
        n_envs: int,
        rngs: Sequence[np.random.Generator],
        table: Optional[RandomizationTable] = None,
        reward_cfg: Optional[RewardConfig] = None,
        commands: Optional[CommandRanges] = None,
        sim_params: Optional[SimParams] = None,
        obs_noise: float = 0.0,
        auto_reset: bool = True,
        fixed_command: Optional[np.ndarray] = None,
    ):
        if len(rngs) != n_envs:
            raise ValueError(f"need one rng per environment, got {len(rngs)} for {n_envs}")
        self.morph = morph
        self.n_envs = n_envs
        self.rngs = list(rngs)
        self.table = table if table is not None else RandomizationTable()
        self.reward_cfg = reward_cfg if reward_cfg is not None else RewardConfig()
        self.command_ranges = commands if commands is not None else CommandRanges()
        self.fixed_command = None if fixed_command is None else np.asarray(fixed_command, dtype=float)
        self.obs_noise = obs_noise
        self.obs_rng: Optional[np.random.Generator] = None
        self.auto_reset = auto_reset
        self.model = WalkerModel(morph, sim_params, n_envs)
        self.agent_layouts = {}
        for limb in morph.limbs:
            self.agent_layouts[(limb.group, limb.side)] = ObservationLayout(limb.dof)
        self.critic_layout = CriticLayout(morph.dof_total)
        self.state = None
        self.snap: Optional[StepSnapshot] = None
        self.commands = np.zeros((n_envs, 4))
        self.start_x = np.zeros(n_envs)

    # -- resets --------------------------------------------------------------

    def _draw_commands(self, idx) -> np.ndarray:
        if self.fixed_command is not None:
            return np.repeat(self.fixed_command[None, :], len(idx), axis=0)
        return np.stack([sample_commands(self.rngs[i], self.command_ranges) for i in idx])

    def _reset_rows(self, idx: np.ndarray):
        overrides = [sample_init_randomization(self.table, self.rngs[i]) for i in idx]
        state = env_reset(self.model, [self.rngs[i] for i in idx], overrides=overrides, idx=idx)
        cmds = self._draw_commands(idx)
        return state, cmds

    def reset(self) -> StepSnapshot:
        idx = np.arange(self.n_envs)
        self.state, self.commands = self._reset_rows(idx)
        self.snap = reset_snapshot(self.model, self.state, self.commands)
        self.start_x = self.state.torso_x.copy()
        return self.snap

    # -- stepping ------------------------------------------------------------

    def _perturbation(self) -> StepPerturbation:
        E, D = self.n_envs, self.model.dof
        delay = np.zeros(E, dtype=int)
        noise = np.zeros((E, D))
        force = np.zeros(E)
        duration = self.table.push_duration
        if self.table.enabled:
            for i in range(E):
                p = sample_step_randomization(
                    self.table, self.rngs[i], float(self.state.t[i]), self.model.tau_max, self.model.params.control_dt
                )
                delay[i], noise[i], force[i] = p.delay_steps, p.torque_noise, p.push_force
        return StepPerturbation(delay, noise, force, duration)

    def step(self, actions: np.ndarray) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        state, snap = env_step(self.model, self.state, actions, self.commands, self._perturbation())
        reward = compute_reward_terms(snap, reference_signals(snap, self.morph), self.reward_cfg)
        done = snap.fallen.copy()
        displacement = np.where(done, state.torso_x - self.start_x, 0.0)
        self.state = state
        self.snap = snap
        if self.auto_reset and np.any(done):
            idx = np.flatnonzero(done)
            fresh, cmds = self._reset_rows(idx)
            self.state.assign(idx, fresh)
            self.commands[idx] = cmds
            self.start_x[idx] = fresh.torso_x
            rs = reset_snapshot(self.model, self.state, self.commands)
            self.snap = merge_snapshots(snap, rs, done)
        return StepResult(reward, done, snap, displacement)

    # -- observations ----------------------------------------------------------

    def agent_obs(self, agent: AgentId, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        layout = self.agent_layouts[(agent.group, agent.side)]
        return build_agent_obs(self.snap, agent, layout, self.morph, self.obs_noise, rng)

    def critic_obs(self) -> np.ndarray:
        privileged = {"friction": self.model.phys["friction"], "mass": self.model.total_mass}
        return build_critic_obs(self.snap, privileged, self.critic_layout, self.morph)

    def active_overrides(self) -> List[PhysicsOverrides]:
        cols = self.model.phys
        return [PhysicsOverrides(**{k: float(v[i]) for k, v in cols.items()}) for i in range(self.n_envs)]
