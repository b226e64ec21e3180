"""Actor and critic observations, the per-limb phase clock, stance masks and commands.

Every builder works on a batch of environments: inputs carry a leading ``E``
axis and outputs are ``(E, width)`` arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation
from .morphology import MorphologyConfig

N_COMMANDS = 4  # standing flag, v_x, v_y, yaw rate


def temporal_director(t, k: float, offset) -> np.ndarray:
    """Per-limb phase clock ``sin(2*pi*(k*t + offset))``; ``offset`` in cycles.

    Whole half-cycles of the offset are applied as a sign flip, so limbs half
    a cycle apart get exactly negated clocks.
    """
    offset = np.asarray(offset, dtype=float)
    halves = np.floor(2.0 * offset)
    rest = offset - 0.5 * halves
    sign = np.where(np.mod(halves, 2.0) == 1.0, -1.0, 1.0)
    return sign * np.sin(2.0 * np.pi * (k * np.asarray(t, dtype=float) + rest))


def stance_mask(t, k: float, offsets: Sequence[float], standing=None) -> np.ndarray:
    """Commanded support phase per leg: stance while the clock is <= 0.

    ``t`` is scalar or ``(E,)``; returns ``(..., n_legs)`` booleans. A set
    standing flag puts every leg in stance.
    """
    t = np.asarray(t, dtype=float)
    clocks = temporal_director(t[..., None], k, np.asarray(offsets, dtype=float))
    mask = clocks <= 0.0
    if standing is not None:
        mask = mask | (np.asarray(standing) > 0.5)[..., None]
    return mask


@dataclass(frozen=True)
class AgentId:
    group: str  # "legs" | "arms"
    side: str  # "left" | "right"

    @property
    def one_hot(self) -> np.ndarray:
        if self.side not in ("left", "right"):
            raise ContractViolation(f"unknown side {self.side!r}")
        return np.array([1.0, 0.0]) if self.side == "left" else np.array([0.0, 1.0])

    @property
    def name(self) -> str:
        return f"{self.side}_{self.group[:-1]}"


class _Layout:
    fields: List[Tuple[str, int]]

    @property
    def width(self) -> int:
        return sum(w for _, w in self.fields)

    def slices(self) -> Dict[str, slice]:
        out, start = {}, 0
        for name, w in self.fields:
            out[name] = slice(start, start + w)
            start += w
        return out

    def pack(self, parts: Dict[str, np.ndarray]) -> np.ndarray:
        cols = []
        lead = None
        for name, w in self.fields:
            if name not in parts:
                raise ContractViolation(f"observation field {name!r} missing")
            a = np.asarray(parts[name], dtype=float)
            if a.shape[-1] != w:
                raise ContractViolation(f"field {name!r} has width {a.shape[-1]}, layout expects {w}")
            lead = a.shape[:-1] if lead is None else lead
            cols.append(np.broadcast_to(a, lead + (w,)))
        return np.concatenate(cols, axis=-1)

    def unpack(self, vec: np.ndarray) -> Dict[str, np.ndarray]:
        vec = np.asarray(vec)
        if vec.shape[-1] != self.width:
            raise ContractViolation(f"vector width {vec.shape[-1]} != layout width {self.width}")
        return {name: vec[..., s] for name, s in self.slices().items()}

    def describe(self) -> List[dict]:
        return [{"name": n, "width": w} for n, w in self.fields]


class ObservationLayout(_Layout):
    """Per-agent actor input: 3 * dof + 14 entries."""

    def __init__(self, dof: int):
        if dof < 1:
            raise ContractViolation("an agent needs at least one joint")
        self.dof = dof
        self.fields = [
            ("q", dof),
            ("qd", dof),
            ("prev_action", dof),
            ("phase", 2),
            ("euler", 3),
            ("ang_vel", 3),
            ("commands", N_COMMANDS),
            ("agent_id", 2),
        ]


class CriticLayout(_Layout):
    """Privileged whole-body input: 4 * dof_total + 26 entries."""

    def __init__(self, dof_total: int):
        self.dof_total = dof_total
        d = dof_total
        self.fields = [
            ("q", d),
            ("qd", d),
            ("prev_action", d),
            ("pos_error", d),
            ("phase", 2),
            ("commands", N_COMMANDS),
            ("lin_vel", 3),
            ("euler", 3),
            ("ang_vel", 3),
            ("push_force", 2),
            ("push_torque", 3),
            ("friction", 1),
            ("mass", 1),
            ("stance", 2),
            ("contact", 2),
        ]


# ---------------------------------------------------------------------------
# Builders


def _torso_euler(snap) -> np.ndarray:
    """(roll, pitch, yaw); only pitch is observable in the sagittal plane."""
    E = snap.torso_pos.shape[0]
    out = np.zeros((E, 3))
    out[:, 1] = snap.torso_pos[:, 2]
    return out


def _torso_ang_vel(snap) -> np.ndarray:
    E = snap.torso_vel.shape[0]
    out = np.zeros((E, 3))
    out[:, 1] = snap.torso_vel[:, 2]
    return out


def group_phase(snap, morph: MorphologyConfig, group: str) -> np.ndarray:
    """(T_left(t), T_right(t)) for the limbs of ``group``; zeros if the group is absent."""
    limbs = morph.legs_ordered if group == "legs" else morph.arms_ordered
    if not limbs:
        return np.zeros((snap.t.shape[0], 2))
    offsets = np.array([l.phase_offset for l in limbs])
    return temporal_director(snap.t[:, None], morph.gait_frequency, offsets)


def build_agent_obs(
    snap,
    agent: AgentId,
    layout: ObservationLayout,
    morph: MorphologyConfig,
    noise_std: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    limb = next((l for l in morph.limbs if l.group == agent.group and l.side == agent.side), None)
    if limb is None:
        raise ContractViolation(f"morphology has no {agent.side} {agent.group[:-1]}")
    if limb.dof != layout.dof:
        raise ContractViolation(f"{limb.name} has {limb.dof} joints, layout expects {layout.dof}")
    sl = morph.joint_slices()[limb.name]
    E = snap.q.shape[0]
    vec = layout.pack(
        {
            "q": snap.q[:, sl],
            "qd": snap.qd[:, sl],
            "prev_action": snap.actions[:, sl],
            "phase": group_phase(snap, morph, agent.group),
            "euler": _torso_euler(snap),
            "ang_vel": _torso_ang_vel(snap),
            "commands": snap.commands,
            "agent_id": np.broadcast_to(agent.one_hot, (E, 2)),
        }
    )
    if noise_std > 0:
        if rng is None:
            raise ContractViolation("observation noise needs an rng")
        noisy = vec + noise_std * rng.standard_normal(vec.shape)
        # Identity bits and commands are exact signals, not sensor readings.
        s = layout.slices()
        for name in ("agent_id", "commands", "phase"):
            noisy[:, s[name]] = vec[:, s[name]]
        vec = noisy
    return vec


def build_group_input(obs_left: np.ndarray, obs_right: np.ndarray) -> np.ndarray:
    if obs_left.shape != obs_right.shape:
        raise ContractViolation(f"group members differ in shape: {obs_left.shape} vs {obs_right.shape}")
    return np.concatenate([obs_left, obs_right], axis=-1)


def build_critic_obs(snap, privileged: Dict[str, np.ndarray], layout: CriticLayout, morph: MorphologyConfig) -> np.ndarray:
    """Noiseless privileged observation.

    ``privileged`` maps ``friction`` and ``mass`` to ``(E,)`` arrays of the
    simulator's active values.
    """
    E, D = snap.q.shape
    if D != layout.dof_total:
        raise ContractViolation(f"snapshot has {D} joints, critic layout expects {layout.dof_total}")
    lin_vel = np.zeros((E, 3))
    lin_vel[:, 0] = snap.torso_vel[:, 0]
    lin_vel[:, 2] = snap.torso_vel[:, 1]
    push = np.zeros((E, 2))
    push[:, 0] = snap.push_force
    legs = morph.legs_ordered
    stance = stance_mask(snap.t, morph.gait_frequency, [l.phase_offset for l in legs], snap.commands[:, 0])
    return layout.pack(
        {
            "q": snap.q,
            "qd": snap.qd,
            "prev_action": snap.actions,
            "pos_error": snap.q_target - snap.q,
            "phase": group_phase(snap, morph, "legs"),
            "commands": snap.commands,
            "lin_vel": lin_vel,
            "euler": _torso_euler(snap),
            "ang_vel": _torso_ang_vel(snap),
            "push_force": push,
            "push_torque": np.zeros((E, 3)),
            "friction": np.asarray(privileged["friction"], dtype=float).reshape(E, 1),
            "mass": np.asarray(privileged["mass"], dtype=float).reshape(E, 1),
            "stance": stance.astype(float),
            "contact": snap.foot_contact.astype(float),
        }
    )


# ---------------------------------------------------------------------------
# Commands


@dataclass
class CommandRanges:
    vx: Tuple[float, float] = (0.2, 1.0)  # m/s
    vy: Tuple[float, float] = (0.0, 0.0)
    yaw_rate: Tuple[float, float] = (0.0, 0.0)
    standing_probability: float = 0.1
    planar: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CommandRanges":
        d = dict(d)
        for key in ("vx", "vy", "yaw_rate"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def sample_commands(rng: np.random.Generator, ranges: CommandRanges) -> np.ndarray:
    """One command vector ``(standing, v_x, v_y, yaw_rate)``, held for an episode."""
    if rng.random() < ranges.standing_probability:
        return np.array([1.0, 0.0, 0.0, 0.0])
    cmd = np.zeros(N_COMMANDS)
    cmd[1] = rng.uniform(*ranges.vx)
    if not ranges.planar:
        cmd[2] = rng.uniform(*ranges.vy)
        cmd[3] = rng.uniform(*ranges.yaw_rate)
    return cmd
