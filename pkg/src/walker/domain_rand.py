"""Physical-parameter randomization at episode start and per control step."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError

# name -> (low, high); every entry is uniform.
TABLE_DEFAULTS: Dict[str, Tuple[float, float]] = {
    "friction": (0.1, 1.2),
    "link_mass_scale": (0.9, 1.13),
    "com_offset": (-0.03, 0.03),
    "motor_delay_ms": (0.0, 3.0),
    "push_force": (-20.0, 20.0),
    "gravity": (9.78, 9.83),
    "joint_damping": (0.0, 0.05),
    "joint_friction": (0.0, 0.05),
    "joint_armature": (0.005, 0.015),
    "kp_scale": (0.95, 1.05),
    "kd_scale": (0.95, 1.05),
}

INIT_PARAMS = (
    "friction",
    "link_mass_scale",
    "com_offset",
    "gravity",
    "joint_damping",
    "joint_friction",
    "joint_armature",
    "kp_scale",
    "kd_scale",
)
STEP_PARAMS = ("motor_delay_ms", "push_force")


@dataclass
class RandomizationTable:
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=lambda: dict(TABLE_DEFAULTS))
    push_probability: float = 1.0 / 150.0  # per control step
    push_duration: float = 0.2  # s
    torque_noise_frac: float = 0.02  # std as a fraction of the torque limit
    delay_stress: bool = False  # force a one-step action delay
    enabled: bool = True

    def __post_init__(self):
        self.ranges = {k: (float(v[0]), float(v[1])) for k, v in self.ranges.items()}
        missing = set(TABLE_DEFAULTS) - set(self.ranges)
        if missing:
            raise ConfigurationError(f"randomization table lacks {sorted(missing)}")
        for name, (lo, hi) in self.ranges.items():
            if lo > hi:
                raise ConfigurationError(f"randomization range {name}: low {lo} > high {hi}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranges"] = {k: [lo, hi] for k, (lo, hi) in self.ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationTable":
        d = dict(d)
        d["ranges"] = {k: tuple(v) for k, v in d.get("ranges", TABLE_DEFAULTS).items()}
        return cls(**d)

    @classmethod
    def disabled(cls) -> "RandomizationTable":
        """Nominal physics: every range collapsed onto its nominal value, no step noise."""
        nominal = dict(NOMINAL)
        return cls(
            ranges={k: (nominal[k], nominal[k]) for k in TABLE_DEFAULTS},
            push_probability=0.0,
            torque_noise_frac=0.0,
            enabled=False,
        )


NOMINAL = {
    "friction": 0.8,
    "link_mass_scale": 1.0,
    "com_offset": 0.0,
    "motor_delay_ms": 0.0,
    "push_force": 0.0,
    "gravity": 9.81,
    "joint_damping": 0.0,
    "joint_friction": 0.0,
    "joint_armature": 0.01,
    "kp_scale": 1.0,
    "kd_scale": 1.0,
}


@dataclass
class PhysicsOverrides:
    """Init-time physical parameters for one environment instance."""

    friction: float = NOMINAL["friction"]
    link_mass_scale: float = 1.0
    com_offset: float = 0.0
    gravity: float = NOMINAL["gravity"]
    joint_damping: float = 0.0
    joint_friction: float = 0.0
    joint_armature: float = NOMINAL["joint_armature"]
    kp_scale: float = 1.0
    kd_scale: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)


def stack_overrides(items: Sequence[PhysicsOverrides]) -> Dict[str, np.ndarray]:
    """Column view over a batch of overrides: name -> (E,) array."""
    return {f.name: np.array([getattr(o, f.name) for o in items], dtype=np.float64) for f in fields(PhysicsOverrides)}


@dataclass
class StepPerturbation:
    delay_steps: int
    torque_noise: np.ndarray  # (D,) N*m
    push_force: float  # N, 0 when no new push starts this step
    push_duration: float  # s


def sample_init_randomization(table: RandomizationTable, rng: np.random.Generator) -> PhysicsOverrides:
    values = {}
    for name in INIT_PARAMS:
        lo, hi = table.ranges[name]
        values[name] = float(rng.uniform(lo, hi)) if hi > lo else lo
    return PhysicsOverrides(**values)


def delay_to_steps(delay_ms: float, control_dt: float) -> int:
    """Round a motor delay to whole control steps."""
    return int(np.floor(delay_ms / 1000.0 / control_dt + 0.5))


def sample_step_randomization(
    table: RandomizationTable,
    rng: np.random.Generator,
    t: float,
    torque_limits: np.ndarray,
    control_dt: float,
) -> StepPerturbation:
    """Draw per-step action delay, torque noise and a possible new push.

    ``t`` is accepted for schedule-dependent tables; the default table is
    stationary.
    """
    lo, hi = table.ranges["motor_delay_ms"]
    delay_ms = rng.uniform(lo, hi) if hi > lo else lo
    delay = 1 if table.delay_stress else delay_to_steps(delay_ms, control_dt)
    if table.torque_noise_frac > 0:
        noise = rng.standard_normal(len(torque_limits)) * table.torque_noise_frac * torque_limits
    else:
        noise = np.zeros(len(torque_limits))
    force = 0.0
    if table.push_probability > 0 and rng.random() < table.push_probability:
        flo, fhi = table.ranges["push_force"]
        force = float(rng.uniform(flo, fhi))
    return StepPerturbation(delay, noise, force, table.push_duration)


def null_perturbation(dof: int) -> StepPerturbation:
    return StepPerturbation(0, np.zeros(dof), 0.0, 0.0)
