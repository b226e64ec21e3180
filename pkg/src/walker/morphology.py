"""Walker layouts: limb chains, physical constants, PD gains and gait timing.

Angles follow a rotation about the lateral (+y) axis with x forward and z up:
a positive hip angle swings the leg backward, a positive knee angle folds
the shank backward, a positive ankle angle points the toes down.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import ConfigurationError


@dataclass
class JointSpec:
    name: str
    length: float  # m, joint to next joint along the link's local -z
    mass: float  # kg
    lower: float  # rad
    upper: float  # rad
    torque_limit: float  # N*m
    kp: float
    kd: float
    default: float = 0.0  # rad, standing posture
    ref_amplitude: float = 0.0  # rad, reference-gait sinusoid amplitude


@dataclass
class LimbSpec:
    name: str
    group: str  # "legs" | "arms"
    side: str  # "left" | "right"
    joints: List[JointSpec]
    phase_offset: float = 0.0  # cycles

    @property
    def dof(self) -> int:
        return len(self.joints)


@dataclass
class FootSpec:
    """Flat foot carried by the last leg joint; contacts at heel and toe."""

    height: float = 0.05  # m, ankle axis above the sole
    heel: float = 0.05  # m behind the ankle
    toe: float = 0.12  # m ahead of the ankle


@dataclass
class MorphologyConfig:
    name: str
    legs: List[LimbSpec]
    arms: List[LimbSpec]
    torso_mass: float = 14.8
    torso_inertia: float = 0.35
    hip_offset: float = 0.2  # m below the torso origin
    shoulder_offset: float = 0.2  # m above the torso origin
    torso_top: float = 0.3  # m above the torso origin, collision point
    foot: FootSpec = field(default_factory=FootSpec)
    gait_frequency: float = 1.5  # k, 1/s
    action_scale: float = 0.25  # rad per unit policy output

    def validate(self) -> None:
        if len(self.legs) != 2:
            raise ConfigurationError(f"expected exactly 2 legs, got {len(self.legs)}")
        if len(self.arms) not in (0, 2):
            raise ConfigurationError(f"expected 0 or 2 arms, got {len(self.arms)}")
        for limbs, group in ((self.legs, "legs"), (self.arms, "arms")):
            sides = sorted(l.side for l in limbs)
            if limbs and sides != ["left", "right"]:
                raise ConfigurationError(f"{group} must be one left and one right limb")
            if len({l.dof for l in limbs}) > 1:
                raise ConfigurationError(f"{group} must have equal DoF on both sides")
        for limb in self.limbs:
            if limb.dof < 1:
                raise ConfigurationError(f"limb {limb.name} has no joints")
            for j in limb.joints:
                if j.torque_limit <= 0:
                    raise ConfigurationError(f"{limb.name}.{j.name}: torque limit must be > 0")
                if j.kp < 0 or j.kd < 0:
                    raise ConfigurationError(f"{limb.name}.{j.name}: gains must be >= 0")
                if not j.lower <= j.default <= j.upper:
                    raise ConfigurationError(f"{limb.name}.{j.name}: default outside limits")
                if j.mass <= 0 or j.length < 0:
                    raise ConfigurationError(f"{limb.name}.{j.name}: bad mass or length")
        if self.torso_mass <= 0 or self.torso_inertia <= 0:
            raise ConfigurationError("torso mass and inertia must be positive")

    @property
    def limbs(self) -> List[LimbSpec]:
        return self.legs_ordered + self.arms_ordered

    @property
    def legs_ordered(self) -> List[LimbSpec]:
        return sorted(self.legs, key=lambda l: l.side != "left")

    @property
    def arms_ordered(self) -> List[LimbSpec]:
        return sorted(self.arms, key=lambda l: l.side != "left")

    @property
    def dof_total(self) -> int:
        return sum(l.dof for l in self.limbs)

    @property
    def leg_dof(self) -> int:
        return self.legs[0].dof

    @property
    def arm_dof(self) -> int:
        return self.arms[0].dof if self.arms else 0

    @property
    def total_mass(self) -> float:
        return self.torso_mass + sum(j.mass for l in self.limbs for j in l.joints)

    def joint_slices(self) -> Dict[str, slice]:
        """Slice of the full joint vector owned by each limb, keyed by limb name."""
        out, start = {}, 0
        for limb in self.limbs:
            out[limb.name] = slice(start, start + limb.dof)
            start += limb.dof
        return out

    def joints(self) -> List[Tuple[LimbSpec, JointSpec]]:
        return [(limb, j) for limb in self.limbs for j in limb.joints]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MorphologyConfig":
        d = dict(d)

        def limb(ld):
            ld = dict(ld)
            ld["joints"] = [JointSpec(**j) for j in ld["joints"]]
            return LimbSpec(**ld)

        d["legs"] = [limb(l) for l in d["legs"]]
        d["arms"] = [limb(l) for l in d["arms"]]
        d["foot"] = FootSpec(**d.get("foot", {}))
        return cls(**d)


def _leg(side: str, phase: float) -> LimbSpec:
    return LimbSpec(
        name=f"{side}_leg",
        group="legs",
        side=side,
        phase_offset=phase,
        joints=[
            JointSpec("hip", 0.35, 3.0, -1.6, 0.9, 150.0, 500.0, 8.0, default=-0.25, ref_amplitude=-0.15),
            JointSpec("knee", 0.35, 2.0, 0.0, 2.3, 150.0, 500.0, 8.0, default=0.5, ref_amplitude=0.3),
            JointSpec("ankle", 0.05, 0.6, -0.9, 0.9, 80.0, 300.0, 5.0, default=-0.25, ref_amplitude=-0.15),
        ],
    )


def _arm(side: str, phase: float) -> LimbSpec:
    return LimbSpec(
        name=f"{side}_arm",
        group="arms",
        side=side,
        phase_offset=phase,
        joints=[
            JointSpec("shoulder", 0.25, 1.2, -1.6, 1.6, 30.0, 40.0, 1.0, default=0.0, ref_amplitude=0.25),
            JointSpec("elbow", 0.25, 0.8, -2.2, 0.0, 20.0, 20.0, 0.5, default=-0.4, ref_amplitude=0.1),
        ],
    )


def planar_walker() -> MorphologyConfig:
    """3-DoF legs, 2-DoF arms, 10 joints, 30 kg."""
    # Arms swing opposite to the same-side leg: offset by half a cycle.
    return MorphologyConfig(
        name="planar-walker",
        legs=[_leg("left", 0.0), _leg("right", 0.5)],
        arms=[_arm("left", 0.5), _arm("right", 0.0)],
    )


def _full_leg(side: str, phase: float) -> LimbSpec:
    def small(name):
        return JointSpec(name, 0.02, 0.3, -0.5, 0.5, 100.0, 600.0, 12.0)

    return LimbSpec(
        name=f"{side}_leg",
        group="legs",
        side=side,
        phase_offset=phase,
        joints=[
            small("hip_yaw"),
            small("hip_roll"),
            JointSpec("hip_pitch", 0.33, 2.8, -1.6, 0.9, 150.0, 500.0, 8.0, default=-0.25, ref_amplitude=-0.15),
            JointSpec("knee", 0.35, 2.0, 0.0, 2.3, 150.0, 500.0, 8.0, default=0.5, ref_amplitude=0.3),
            JointSpec("ankle_pitch", 0.02, 0.3, -0.9, 0.9, 100.0, 500.0, 8.0, default=-0.25, ref_amplitude=-0.15),
            JointSpec("ankle_roll", 0.03, 0.3, -0.5, 0.5, 100.0, 600.0, 12.0),
        ],
    )


def _full_arm(side: str, phase: float) -> LimbSpec:
    return LimbSpec(
        name=f"{side}_arm",
        group="arms",
        side=side,
        phase_offset=phase,
        joints=[
            JointSpec("shoulder_pitch", 0.02, 0.3, -1.6, 1.6, 30.0, 40.0, 1.0, ref_amplitude=0.25),
            JointSpec("shoulder_roll", 0.02, 0.3, -0.5, 0.5, 30.0, 40.0, 1.0),
            JointSpec("upper_arm_yaw", 0.22, 0.8, -0.5, 0.5, 30.0, 40.0, 1.0),
            JointSpec("elbow", 0.25, 0.6, -2.2, 0.0, 20.0, 20.0, 0.5, default=-0.4, ref_amplitude=0.1),
        ],
    )


def paper_dims() -> MorphologyConfig:
    """6-DoF legs and 4-DoF arms (20 joints) for dimension bookkeeping."""
    return MorphologyConfig(
        name="paper-dims",
        legs=[_full_leg("left", 0.0), _full_leg("right", 0.5)],
        arms=[_full_arm("left", 0.5), _full_arm("right", 0.0)],
        torso_mass=13.0,
    )


PRESETS = {"planar-walker": planar_walker, "paper-dims": paper_dims}


def preset(name: str) -> MorphologyConfig:
    try:
        morph = PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown morphology preset {name!r}; known: {sorted(PRESETS)}") from None
    morph.validate()
    return morph


def limb_phase_offsets(morph: MorphologyConfig) -> List[float]:
    return [l.phase_offset for l in morph.limbs]


def find_limb(morph: MorphologyConfig, group: str, side: str) -> Optional[LimbSpec]:
    for l in morph.limbs:
        if l.group == group and l.side == side:
            return l
    return None
