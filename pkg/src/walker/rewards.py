"""Shaped locomotion reward: sixteen named terms, each scaled and summed into
one team reward shared by every limb agent.

All terms are computed for a batch of environments from a ``StepSnapshot``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ContractViolation
from .morphology import MorphologyConfig
from .obs import stance_mask, temporal_director

DEFAULT_SCALES: Dict[str, float] = {
    "joint_pos": 3.5,
    "track_lin_vel": 1.5,
    "track_ang_vel": 1.4,
    "dof_torques": -2.0e-3,
    "dof_vel": -5.0e-4,
    "dof_acc": -1.0e-7,
    "feet_air_time": 2.0,
    "feet_clearance": 2.0,
    "feet_contact_number": 1.2,
    "orientation": 1.0,
    "collision": -1.0,
    "feet_slip": -5.0e-2,
    "base_height": 0.2,
    "action_smoothness_1": -0.1,
    "action_smoothness_2": -0.1,
    "torque_rate": -2.0e-4,
}
TERMS = tuple(DEFAULT_SCALES)

# Snapshot fields each term reads; a missing one is reported by term name.
_NEEDS = {
    "joint_pos": ("q", "q_default"),
    "track_lin_vel": ("commands", "torso_vel"),
    "track_ang_vel": ("commands",),
    "dof_torques": ("tau", "tau_max"),
    "dof_vel": ("qd",),
    "dof_acc": ("qd", "prev_qd", "dt"),
    "feet_air_time": ("touchdown_air_time", "swing_displacement"),
    "feet_clearance": ("foot_height",),
    "feet_contact_number": ("foot_contact",),
    "orientation": ("torso_pos",),
    "collision": ("collision_force",),
    "feet_slip": ("foot_contact", "foot_vel"),
    "base_height": ("torso_pos",),
    "action_smoothness_1": ("actions", "prev_actions"),
    "action_smoothness_2": ("actions", "prev_actions", "prev_prev_actions"),
    "torque_rate": ("tau", "prev_tau", "tau_max", "dt"),
}


@dataclass
class RewardConfig:
    scales: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SCALES))
    sigma_lin: float = 0.25  # m^2/s^2
    sigma_yaw: float = 0.25  # rad^2/s^2
    air_time_decay: float = 5.0  # 1/m
    clearance_tolerance: float = 0.01  # m
    foot_height_target: float = 0.06  # m
    base_height_target: Optional[float] = None  # m; None -> nominal standing height
    contact_match: float = 1.0
    contact_mismatch: float = -0.3
    collision_threshold: float = 0.1  # N
    literal_orientation: bool = False  # exp(+|theta|) + exp(+|g_proj|) as printed

    def __post_init__(self):
        unknown = set(self.scales) - set(TERMS)
        if unknown:
            raise ContractViolation(f"unknown reward terms {sorted(unknown)}")
        self.scales = {k: float(self.scales.get(k, DEFAULT_SCALES[k])) for k in TERMS}
        if self.sigma_lin <= 0 or self.sigma_yaw <= 0:
            raise ContractViolation("tracking temperatures must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        return cls(**d)


@dataclass
class ReferenceSignals:
    q_ref: np.ndarray  # (E, D) offsets from the default posture
    stance: np.ndarray  # (E, n_legs) bool, commanded support phase


@dataclass
class RewardBreakdown:
    unscaled: Dict[str, np.ndarray]  # term -> (E,)
    scaled: Dict[str, np.ndarray]
    total: np.ndarray  # (E,)


def reference_joint_positions(t, commands, morph: MorphologyConfig) -> np.ndarray:
    """Reference joint offsets: ``A_j * T_limb(t)``, zero while standing.

    ``t`` is ``(E,)`` and ``commands`` ``(E, 4)``; returns ``(E, D)``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    commands = np.atleast_2d(np.asarray(commands, dtype=float))
    amp = np.array([j.ref_amplitude for _, j in morph.joints()])
    offsets = np.array([limb.phase_offset for limb, _ in morph.joints()])
    clock = temporal_director(t[:, None], morph.gait_frequency, offsets[None, :])
    walking = (commands[:, 0] < 0.5)[:, None]
    return np.where(walking, amp[None, :] * clock, 0.0)


def reference_signals(snap, morph: MorphologyConfig) -> ReferenceSignals:
    offsets = [l.phase_offset for l in morph.legs_ordered]
    return ReferenceSignals(
        q_ref=reference_joint_positions(snap.t, snap.commands, morph),
        stance=stance_mask(snap.t, morph.gait_frequency, offsets, snap.commands[:, 0]),
    )


def _field(snap, term: str, name: str):
    value = getattr(snap, name, None)
    if value is None:
        raise ContractViolation(f"reward term {term!r} needs snapshot field {name!r}")
    return value


def compute_reward_terms(snap, refs: ReferenceSignals, cfg: RewardConfig) -> RewardBreakdown:
    for term, names in _NEEDS.items():
        for name in names:
            _field(snap, term, name)
    if refs is None or refs.q_ref is None or refs.stance is None:
        raise ContractViolation("reward terms 'joint_pos' and 'feet_contact_number' need reference signals")

    u: Dict[str, np.ndarray] = {}
    dt = snap.dt
    tau_max = snap.tau_max
    pitch = snap.torso_pos[:, 2]

    dev = snap.q - snap.q_default - refs.q_ref
    u["joint_pos"] = np.exp(-np.sqrt(np.sum(dev * dev, axis=1)))

    # Planar body: lateral velocity and yaw rate are identically zero.
    v_err = np.stack([snap.commands[:, 1] - snap.torso_vel[:, 0], snap.commands[:, 2]], axis=1)
    u["track_lin_vel"] = np.exp(-np.sum(v_err * v_err, axis=1) / cfg.sigma_lin)
    u["track_ang_vel"] = np.exp(-(snap.commands[:, 3] ** 2) / cfg.sigma_yaw)

    u["dof_torques"] = np.sum((snap.tau / tau_max) ** 2, axis=1)
    u["dof_vel"] = np.sum(snap.qd**2, axis=1)
    u["dof_acc"] = np.sum(((snap.qd - snap.prev_qd) / dt) ** 2, axis=1)

    u["feet_air_time"] = np.sum(
        snap.touchdown_air_time * np.exp(-cfg.air_time_decay * np.abs(snap.swing_displacement)), axis=1
    )
    u["feet_clearance"] = np.sum(
        np.abs(snap.foot_height - cfg.foot_height_target) < cfg.clearance_tolerance, axis=1
    ).astype(float)
    match = snap.foot_contact == refs.stance
    u["feet_contact_number"] = np.sum(np.where(match, cfg.contact_match, cfg.contact_mismatch), axis=1)

    # |(roll, pitch)| and the horizontal part of gravity in the torso frame.
    tilt = np.abs(pitch)
    g_proj = np.abs(np.sin(pitch))
    if cfg.literal_orientation:
        u["orientation"] = np.exp(tilt) + np.exp(g_proj)
    else:
        u["orientation"] = np.exp(-tilt) + np.exp(-g_proj)

    u["collision"] = np.sum(snap.collision_force > cfg.collision_threshold, axis=1).astype(float)
    foot_speed2 = np.sum(snap.foot_vel**2, axis=-1)
    u["feet_slip"] = np.sum(snap.foot_contact * foot_speed2, axis=1)

    h_target = snap.nominal_height if cfg.base_height_target is None else cfg.base_height_target
    u["base_height"] = np.exp(-np.abs(snap.torso_pos[:, 1] - h_target))

    d1 = snap.actions - snap.prev_actions
    d2 = snap.actions - 2.0 * snap.prev_actions + snap.prev_prev_actions
    u["action_smoothness_1"] = np.sum(d1 * d1, axis=1)
    u["action_smoothness_2"] = np.sum(d2 * d2, axis=1)
    u["torque_rate"] = np.sum(((snap.tau - snap.prev_tau) / (tau_max * dt)) ** 2, axis=1)

    scaled = {k: cfg.scales[k] * u[k] for k in TERMS}
    total = np.zeros_like(u["joint_pos"])
    for k in TERMS:
        total = total + scaled[k]
    return RewardBreakdown(unscaled={k: u[k] for k in TERMS}, scaled=scaled, total=total)
