"""Planar articulated walker: floating torso plus limb chains in the sagittal plane.

Generalized coordinates are ``[x, z, pitch, q_1 .. q_D]``. Every link carries
a lumped mass at its centre with a slender-rod inertia; the mass matrix and
velocity-product terms are assembled from point Jacobians, so the model is an
exact Lagrangian system for that mass distribution.

Integration is semi-implicit Euler: velocities first, then positions from
the new velocities. Stiff linear terms (PD gains, joint damping, contact
spring-dampers, unsaturated tangential friction) are evaluated at the new
velocity, which keeps the 240 Hz stepper stable for light distal links.

All state arrays carry a leading batch axis of independent environments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .domain_rand import NOMINAL, PhysicsOverrides, StepPerturbation, stack_overrides
from .errors import ConfigurationError, ContractViolation, SimulationBlowUp
from .morphology import MorphologyConfig

N_BASE = 3  # x, z, pitch


@dataclass
class SimParams:
    control_dt: float = 1.0 / 60.0
    substeps: int = 4
    contact_stiffness: float = 2.0e4  # N/m
    contact_damping: float = 200.0  # N*s/m
    tangent_damping: float = 500.0  # N*s/m
    contact_threshold: float = 0.1  # N
    joint_friction_velocity: float = 0.1  # rad/s, Coulomb regularization width
    reset_noise: float = 0.05  # rad
    fall_height_frac: float = 0.6
    fall_pitch: float = 1.0  # rad
    fixed_base: bool = False

    @property
    def dt(self) -> float:
        return self.control_dt / self.substeps


# ---------------------------------------------------------------------------
# Pure force laws


def pd_torque(q, qd, q_target, kp, kd, tau_max) -> np.ndarray:
    """Saturated PD law ``clip(kp*(q_target - q) - kd*qd, -tau_max, tau_max)``."""
    q, qd, q_target = np.asarray(q), np.asarray(qd), np.asarray(q_target)
    if not (q.shape == qd.shape == q_target.shape):
        raise ContractViolation(f"pd_torque shapes differ: {q.shape}, {qd.shape}, {q_target.shape}")
    tau_max = np.asarray(tau_max)
    return np.clip(kp * (q_target - q) - kd * qd, -tau_max, tau_max)


@dataclass
class GroundParams:
    stiffness: float = 2.0e4
    damping: float = 200.0
    tangent_damping: float = 500.0
    threshold: float = 0.1


def contact_forces(foot_pos, foot_vel, ground: GroundParams, mu):
    """Penalty contact against the plane z = 0.

    ``foot_pos`` and ``foot_vel`` are ``(..., 2)`` arrays of (x, z). Returns
    ``(normal, tangent, flag)`` with the batch shape of the inputs.
    """
    foot_pos, foot_vel = np.asarray(foot_pos, dtype=float), np.asarray(foot_vel, dtype=float)
    pen = np.maximum(0.0, -foot_pos[..., 1])
    normal = np.where(pen > 0.0, ground.stiffness * pen - ground.damping * foot_vel[..., 1], 0.0)
    normal = np.maximum(normal, 0.0)
    limit = mu * normal
    tangent = -np.clip(ground.tangent_damping * foot_vel[..., 0], -limit, limit)
    return normal, tangent, normal > ground.threshold


# ---------------------------------------------------------------------------
# State containers


@dataclass
class WalkerState:
    pos: np.ndarray  # (E, 3 + D) generalized positions
    vel: np.ndarray  # (E, 3 + D) generalized velocities
    tau: np.ndarray  # (E, D) last applied motor torques
    foot_contact: np.ndarray  # (E, 2) bool
    foot_force: np.ndarray  # (E, 2) summed normal force per foot, N
    foot_tangent: np.ndarray  # (E, 2) summed tangential force per foot, N
    air_time: np.ndarray  # (E, 2) s
    swing_start_x: np.ndarray  # (E, 2) foot x at lift-off
    t: np.ndarray  # (E,) s
    prev_actions: np.ndarray  # (E, D) a_{t-1}
    prev_prev_actions: np.ndarray  # (E, D) a_{t-2}
    prev_qd: np.ndarray  # (E, D) joint velocity at the previous control step
    prev_tau: np.ndarray  # (E, D)
    push_force: np.ndarray  # (E,) N, horizontal, at the torso COM
    push_substeps: np.ndarray  # (E,) int, substeps the push remains active
    collision_force: np.ndarray  # (E, C) non-foot contact force magnitudes
    step_count: np.ndarray  # (E,) int

    @property
    def q(self) -> np.ndarray:
        return self.pos[:, N_BASE:]

    @property
    def qd(self) -> np.ndarray:
        return self.vel[:, N_BASE:]

    @property
    def torso_x(self) -> np.ndarray:
        return self.pos[:, 0]

    @property
    def torso_z(self) -> np.ndarray:
        return self.pos[:, 1]

    @property
    def pitch(self) -> np.ndarray:
        return self.pos[:, 2]

    @property
    def n_envs(self) -> int:
        return self.pos.shape[0]

    def copy(self) -> "WalkerState":
        return WalkerState(**{k: np.array(v, copy=True) for k, v in self.__dict__.items()})

    def select(self, idx) -> "WalkerState":
        return WalkerState(**{k: np.array(v[idx], copy=True) for k, v in self.__dict__.items()})

    def assign(self, idx, other: "WalkerState") -> None:
        for k, v in self.__dict__.items():
            v[idx] = getattr(other, k)


@dataclass
class StepSnapshot:
    """Everything the reward and observation builders read after one control step."""

    q: np.ndarray
    qd: np.ndarray
    prev_qd: np.ndarray
    tau: np.ndarray
    prev_tau: np.ndarray
    tau_max: np.ndarray  # (D,)
    q_default: np.ndarray  # (D,)
    q_target: np.ndarray  # (E, D)
    actions: np.ndarray  # a_t, policy output
    prev_actions: np.ndarray  # a_{t-1}
    prev_prev_actions: np.ndarray  # a_{t-2}
    torso_pos: np.ndarray  # (E, 3) x, z, pitch
    torso_vel: np.ndarray  # (E, 3)
    foot_height: np.ndarray  # (E, 2) lowest sole point
    foot_x: np.ndarray  # (E, 2)
    foot_vel: np.ndarray  # (E, 2, 2) sole-centre (vx, vz)
    foot_contact: np.ndarray  # (E, 2) bool
    foot_force: np.ndarray  # (E, 2)
    first_contact: np.ndarray  # (E, 2) bool, touchdown this step
    touchdown_air_time: np.ndarray  # (E, 2) air time credited at touchdown
    swing_displacement: np.ndarray  # (E, 2) horizontal foot travel over the swing
    air_time: np.ndarray  # (E, 2)
    collision_force: np.ndarray  # (E, C)
    commands: np.ndarray  # (E, 4)
    push_force: np.ndarray  # (E,)
    t: np.ndarray  # (E,) time after the step
    t_prev: np.ndarray  # (E,) time at which the action was chosen
    dt: float
    nominal_height: float
    fallen: np.ndarray  # (E,) bool


# ---------------------------------------------------------------------------
# Model


@dataclass
class _Vector:
    body: int
    local: Tuple[float, float]
    com_offset: bool = False  # local x shifted by the per-env torso COM offset


class WalkerModel:
    """Kinematic bookkeeping plus per-environment physical parameters."""

    def __init__(
        self,
        morph: MorphologyConfig,
        params: Optional[SimParams] = None,
        n_envs: int = 1,
        overrides: Optional[Sequence[PhysicsOverrides]] = None,
        validate: bool = True,
    ):
        if validate:
            morph.validate()
        self.morph = morph
        self.params = params or SimParams()
        self.n_envs = n_envs
        self._build()
        self.set_overrides(overrides or [PhysicsOverrides() for _ in range(n_envs)])
        self.nominal_height = self._standing_height()

    # -- construction ------------------------------------------------------

    def _build(self) -> None:
        morph = self.morph
        limbs = morph.limbs
        D = morph.dof_total
        self.dof = D
        self.n_gen = N_BASE + D
        vectors: List[_Vector] = []

        def vec(body, a, b, com=False):
            vectors.append(_Vector(body, (a, b), com))
            return len(vectors) - 1

        # Points are linear combinations of vectors; stored as {vector: coeff}.
        points: List[Dict[int, float]] = []
        point_names: List[str] = []

        def point(name, terms):
            points.append(dict(terms))
            point_names.append(name)
            return len(points) - 1

        n_bodies = 1 + D
        chain = np.zeros((n_bodies, D))
        masses = np.zeros(n_bodies)
        inertias = np.zeros(n_bodies)
        com_point = np.zeros(n_bodies, dtype=int)

        torso_com_vec = vec(0, 0.0, 0.0, com=True)
        com_point[0] = point("torso_com", {torso_com_vec: 1.0})
        masses[0] = morph.torso_mass
        inertias[0] = morph.torso_inertia
        foot_heel, foot_toe, foot_sole = [], [], []
        collision: List[int] = [point("torso_top", {vec(0, 0.0, morph.torso_top): 1.0})]
        self.joint_names: List[str] = []
        self.limb_of_joint: List[int] = []

        j = 0
        foot = morph.foot
        for li, limb in enumerate(limbs):
            if limb.group == "legs":
                root = {vec(0, 0.0, -morph.hip_offset): 1.0}
            else:
                root = {vec(0, 0.0, morph.shoulder_offset): 1.0}
            ancestors: List[int] = []
            start = dict(root)
            for k, js in enumerate(limb.joints):
                body = 1 + j
                ancestors.append(j)
                chain[body, ancestors] = 1.0
                self.joint_names.append(f"{limb.name}.{js.name}")
                self.limb_of_joint.append(li)
                is_foot = limb.group == "legs" and k == limb.dof - 1
                masses[body] = js.mass
                if is_foot:
                    h = foot.height
                    com = vec(body, 0.5 * (foot.toe - foot.heel), -0.5 * h)
                    com_point[body] = point(f"{limb.name}.foot_com", {**start, com: 1.0})
                    inertias[body] = js.mass * ((foot.toe + foot.heel) ** 2 + h**2) / 12.0
                    foot_heel.append(point(f"{limb.name}.heel", {**start, vec(body, -foot.heel, -h): 1.0}))
                    foot_toe.append(point(f"{limb.name}.toe", {**start, vec(body, foot.toe, -h): 1.0}))
                    foot_sole.append(point(f"{limb.name}.sole", {**start, vec(body, 0.0, -h): 1.0}))
                else:
                    end = vec(body, 0.0, -js.length)
                    com_point[body] = point(f"{limb.name}.{js.name}_com", {**start, end: 0.5})
                    inertias[body] = js.mass * js.length**2 / 12.0
                    start = {**start, end: 1.0}
                    if js.length > 0.05 or k == limb.dof - 1:
                        collision.append(point(f"{limb.name}.{js.name}_end", start))
                j += 1

        K, P = len(vectors), len(points)
        A = np.zeros((P, K))
        for p, terms in enumerate(points):
            for k, c in terms.items():
                A[p, k] = c
        vec_body = np.array([v.body for v in vectors])
        G = np.zeros((K, self.n_gen))
        G[:, 2] = 1.0
        G[:, N_BASE:] = chain[vec_body]
        Gb = np.zeros((n_bodies, self.n_gen))
        Gb[:, 2] = 1.0
        Gb[:, N_BASE:] = chain

        self.A, self.G, self.Gb, self.chain = A, G, Gb, chain
        self.vec_body = vec_body
        self.local_base = np.array([v.local for v in vectors], dtype=float)
        self.com_offset_mask = np.array([v.com_offset for v in vectors])
        self.point_names = point_names
        self.base_masses, self.base_inertias = masses, inertias
        self.com_point = com_point
        self.heel, self.toe, self.sole = np.array(foot_heel), np.array(foot_toe), np.array(foot_sole)
        self.foot_points = np.concatenate([self.heel, self.toe])  # heels of all feet, then toes
        self.collision_points = np.array(collision)
        self.contact_points = np.concatenate([self.foot_points, self.collision_points])
        self.n_feet = len(foot_sole)
        self.torso_com_point = com_point[0]

        joints = [js for _, js in morph.joints()]
        self.q_default = np.array([js.default for js in joints])
        self.q_lower = np.array([js.lower for js in joints])
        self.q_upper = np.array([js.upper for js in joints])
        self.tau_max = np.array([js.torque_limit for js in joints])
        self.kp_base = np.array([js.kp for js in joints])
        self.kd_base = np.array([js.kd for js in joints])
        self.ref_amplitude = np.array([js.ref_amplitude for js in joints])
        # Rows used by the mass matrix and bias terms.
        self._A_com = A[com_point]
        self._A_contact = A[self.contact_points]

    def set_overrides(self, overrides: Sequence[PhysicsOverrides], idx=None) -> None:
        cols = stack_overrides(overrides)
        if idx is None:
            if len(overrides) != self.n_envs:
                raise ContractViolation(f"need {self.n_envs} overrides, got {len(overrides)}")
            self.phys = cols
        else:
            for k, v in cols.items():
                self.phys[k][idx] = v
        self._refresh()

    def _refresh(self) -> None:
        p = self.phys
        E = self.n_envs
        local = np.broadcast_to(self.local_base, (E,) + self.local_base.shape).copy()
        local[:, self.com_offset_mask, 0] += p["com_offset"][:, None]
        self.local = local
        self.masses = self.base_masses[None, :] * p["link_mass_scale"][:, None]
        self.inertias = self.base_inertias[None, :] * p["link_mass_scale"][:, None]
        self.kp = self.kp_base[None, :] * p["kp_scale"][:, None]
        self.kd = self.kd_base[None, :] * p["kd_scale"][:, None]
        self.total_mass = self.masses.sum(axis=1)

    # -- kinematics ----------------------------------------------------------

    def _vectors(self, pos: np.ndarray, local: Optional[np.ndarray] = None) -> np.ndarray:
        """World-frame vectors ``(E, K, 2)``."""
        local = self.local if local is None else local
        phi_body = pos[:, 2:3] + pos[:, N_BASE:] @ self.chain.T
        phi = phi_body[:, self.vec_body]
        c, s = np.cos(phi), np.sin(phi)
        a, b = local[..., 0], local[..., 1]
        return np.stack([a * c + b * s, -a * s + b * c], axis=-1)

    def point_positions(self, pos: np.ndarray, rows=None, local=None) -> np.ndarray:
        A = self.A if rows is None else self.A[rows]
        return pos[:, None, 0:2] + A @ self._vectors(pos, local)

    def _jacobians(self, W: np.ndarray, A: np.ndarray) -> np.ndarray:
        E, K, _ = W.shape
        perp = np.stack([W[..., 1], -W[..., 0]], axis=-1)
        JW = perp[..., None] * self.G[None, :, None, :]
        J = (A @ JW.reshape(E, K, 2 * self.n_gen)).reshape(E, A.shape[0], 2, self.n_gen)
        J[:, :, 0, 0] += 1.0
        J[:, :, 1, 1] += 1.0
        return J

    def point_jacobians(self, pos: np.ndarray, rows: Optional[np.ndarray] = None) -> np.ndarray:
        A = self.A if rows is None else self.A[rows]
        return self._jacobians(self._vectors(pos), A)

    def point_velocities(self, pos, vel, rows=None) -> np.ndarray:
        return np.einsum("epcn,en->epc", self.point_jacobians(pos, rows), vel)

    def mass_matrix(self, pos: np.ndarray) -> np.ndarray:
        W = self._vectors(pos)
        return self._mass_matrix(self._jacobians(W, self._A_com))

    def _mass_matrix(self, Jc: np.ndarray) -> np.ndarray:
        E = Jc.shape[0]
        Jm = (Jc * np.sqrt(self.masses)[:, :, None, None]).reshape(E, -1, self.n_gen)
        M = Jm.transpose(0, 2, 1) @ Jm
        M += np.einsum("eb,bn,bm->enm", self.inertias, self.Gb, self.Gb)
        d = np.arange(N_BASE, self.n_gen)
        M[:, d, d] += self.phys["joint_armature"][:, None]
        return M

    def mechanical_energy(self, state: WalkerState) -> np.ndarray:
        M = self.mass_matrix(state.pos)
        ke = 0.5 * np.einsum("en,enm,em->e", state.vel, M, state.vel)
        z = self.point_positions(state.pos, self.com_point)[..., 1]
        pe = np.sum(self.masses * z, axis=1) * self.phys["gravity"]
        return ke + pe

    # -- reset ---------------------------------------------------------------

    def _standing_height(self) -> float:
        pos = np.zeros((1, self.n_gen))
        pos[0, N_BASE:] = self.q_default
        pts = self.point_positions(pos, local=self.local_base[None])
        height = -pts[0, self.foot_points, 1].min()
        others = pts[0, self.collision_points, 1] + height
        if height <= 0 or np.any(others < 0.0):
            bad = [self.point_names[p] for p, z in zip(self.collision_points, others) if z < 0]
            raise ConfigurationError(f"default posture puts {bad or 'the torso'} below the ground")
        return float(height)

    def standing_pose(self, q: np.ndarray, idx=None) -> np.ndarray:
        """Generalized positions that rest the lowest foot point on the ground."""
        local = self.local if idx is None else self.local[idx]
        pos = np.zeros((q.shape[0], self.n_gen))
        pos[:, N_BASE:] = q
        pts = self.point_positions(pos, self.foot_points, local)
        pos[:, 1] = -pts[..., 1].min(axis=1)
        return pos

    def empty_state(self, E: Optional[int] = None) -> WalkerState:
        E = self.n_envs if E is None else E
        D, nf, C = self.dof, self.n_feet, len(self.collision_points)
        z = lambda *s: np.zeros(s)
        return WalkerState(
            pos=z(E, self.n_gen),
            vel=z(E, self.n_gen),
            tau=z(E, D),
            foot_contact=np.zeros((E, nf), dtype=bool),
            foot_force=z(E, nf),
            foot_tangent=z(E, nf),
            air_time=z(E, nf),
            swing_start_x=z(E, nf),
            t=z(E),
            prev_actions=z(E, D),
            prev_prev_actions=z(E, D),
            prev_qd=z(E, D),
            prev_tau=z(E, D),
            push_force=z(E),
            push_substeps=np.zeros(E, dtype=int),
            collision_force=z(E, C),
            step_count=np.zeros(E, dtype=int),
        )


def env_reset(
    model: WalkerModel,
    rngs: Sequence[np.random.Generator],
    noise: Optional[float] = None,
    overrides: Optional[Sequence[PhysicsOverrides]] = None,
    idx=None,
) -> WalkerState:
    """Fresh standing states for the environments in ``idx`` (all by default).

    Joints start at the default posture plus uniform noise, clipped to their
    limits; the torso is lowered until the lowest sole point touches z = 0.
    """
    idx = np.arange(model.n_envs) if idx is None else np.asarray(idx)
    if overrides is not None:
        model.set_overrides(overrides, idx)
    noise = model.params.reset_noise if noise is None else noise
    E = len(idx)
    q = np.repeat(model.q_default[None, :], E, axis=0)
    if noise > 0:
        q = q + np.stack([rng.uniform(-noise, noise, model.dof) for rng in rngs])
    q = np.clip(q, model.q_lower, model.q_upper)
    state = model.empty_state(E)
    state.pos = model.standing_pose(q, idx)
    feet = model.point_positions(state.pos, model.sole, model.local[idx])
    state.swing_start_x = feet[..., 0]
    state.foot_contact[:] = True
    weight = model.total_mass[idx] * model.phys["gravity"][idx]
    state.foot_force[:] = (weight / model.n_feet)[:, None]
    return state


# ---------------------------------------------------------------------------
# Integration


@dataclass
class JointDrive:
    """PD position targets with optional additive torque noise."""

    q_target: np.ndarray  # (E, D)
    torque_noise: Optional[np.ndarray] = None  # (E, D)


def apply_push(state: WalkerState, force_x, duration: float, dt: float) -> WalkerState:
    """Schedule a horizontal force at the torso COM for ``duration`` seconds."""
    force_x = np.broadcast_to(np.asarray(force_x, dtype=float), state.push_force.shape)
    new = state.copy()
    start = force_x != 0.0
    new.push_force[start] = force_x[start]
    new.push_substeps[start] = int(round(duration / dt))
    return new


def integrate(
    model: WalkerModel,
    state: WalkerState,
    dt: float,
    torques: Optional[np.ndarray] = None,
    drive: Optional[JointDrive] = None,
) -> WalkerState:
    """Advance one physics substep of length ``dt``.

    Exactly one of ``torques`` (explicit motor torques) or ``drive`` (PD
    targets) may be given; with neither, the motors are slack.
    """
    if torques is not None and drive is not None:
        raise ContractViolation("pass either torques or a PD drive, not both")
    p = model.params
    phys = model.phys
    E, n, D = state.pos.shape[0], model.n_gen, model.dof
    pos, vel = state.pos, state.vel
    q, qd = pos[:, N_BASE:], vel[:, N_BASE:]

    W = model._vectors(pos)
    Jcom = model._jacobians(W, model._A_com)
    M = model._mass_matrix(Jcom)

    # Velocity-product (centripetal) and gravity generalized forces.
    phid = vel @ model.G.T
    acc_c = -(model._A_com @ (phid[..., None] ** 2 * W))
    mJ = Jcom * model.masses[:, :, None, None]
    bias = np.einsum("ebcn,ebc->en", mJ, acc_c)
    Q = -phys["gravity"][:, None] * mJ[:, :, 1, :].sum(axis=1) - bias

    implicit = np.zeros((E, n, n))
    joint_coef = np.broadcast_to(phys["joint_damping"][:, None], (E, D)).copy()
    tau_exp = np.zeros((E, D))
    pd_coef = np.zeros((E, D))
    if torques is not None:
        tau_exp = np.asarray(torques, dtype=float).reshape(E, D).copy()
    elif drive is not None:
        err = drive.q_target - q
        est = model.kp * err - model.kd * qd
        sat = np.abs(est) > model.tau_max
        tau_exp = np.where(sat, np.clip(est, -model.tau_max, model.tau_max), model.kp * err)
        pd_coef = np.where(sat, 0.0, model.kd + dt * model.kp)
        joint_coef += pd_coef
        if drive.torque_noise is not None:
            tau_exp = tau_exp + drive.torque_noise
    jf = phys["joint_friction"][:, None]
    Q[:, N_BASE:] += tau_exp - jf * np.clip(qd / p.joint_friction_velocity, -1.0, 1.0)
    d = np.arange(N_BASE, n)
    implicit[:, d, d] += joint_coef

    # Pushes at the torso COM.
    pushing = state.push_substeps > 0
    if np.any(pushing):
        f = np.where(pushing, state.push_force, 0.0)
        Q += f[:, None] * Jcom[:, 0, 0, :]

    # Ground contact at every contact point.
    Jc = model._jacobians(W, model._A_contact)
    pc = pos[:, None, 0:2] + model._A_contact @ W
    vc = np.einsum("epcn,en->epc", Jc, vel)
    mu = phys["friction"][:, None]
    pen = np.maximum(0.0, -pc[..., 1])
    n_est = p.contact_stiffness * pen - p.contact_damping * vc[..., 1]
    active = (pen > 0.0) & (n_est > 0.0)
    n_est = np.where(active, n_est, 0.0)
    t_est = p.tangent_damping * vc[..., 0]
    t_sat = active & (np.abs(t_est) > mu * n_est)
    t_lin = active & ~t_sat
    fn_exp = np.where(active, p.contact_stiffness * pen, 0.0)
    ft_exp = np.where(t_sat, -np.sign(vc[..., 0]) * mu * n_est, 0.0)
    cn = np.where(active, p.contact_damping + dt * p.contact_stiffness, 0.0)
    ct = np.where(t_lin, p.tangent_damping, 0.0)
    Q += np.einsum("epn,ep->en", Jc[:, :, 0, :], ft_exp) + np.einsum("epn,ep->en", Jc[:, :, 1, :], fn_exp)
    if np.any(active):
        Jx = Jc[:, :, 0, :] * np.sqrt(ct)[..., None]
        Jz = Jc[:, :, 1, :] * np.sqrt(cn)[..., None]
        implicit += Jx.transpose(0, 2, 1) @ Jx + Jz.transpose(0, 2, 1) @ Jz

    lhs = M + dt * implicit
    rhs = np.einsum("enm,em->en", M, vel) + dt * Q
    new_vel = np.zeros_like(vel)
    free = slice(N_BASE, n) if p.fixed_base else slice(0, n)
    new_vel[:, free] = np.linalg.solve(lhs[:, free, free], rhs[:, free, None])[..., 0]
    new_pos = pos + dt * new_vel

    # Joint stops.
    qn = new_pos[:, N_BASE:]
    lo, hi = qn < model.q_lower, qn > model.q_upper
    if np.any(lo | hi):
        qn[...] = np.clip(qn, model.q_lower, model.q_upper)
        jv = new_vel[:, N_BASE:]
        jv[(lo & (jv < 0)) | (hi & (jv > 0))] = 0.0

    if not (np.all(np.isfinite(new_pos)) and np.all(np.isfinite(new_vel))):
        bad = np.flatnonzero(~np.all(np.isfinite(new_pos) & np.isfinite(new_vel), axis=1))
        raise SimulationBlowUp(f"non-finite state in envs {bad.tolist()}", int(state.step_count.max()))

    # Forces actually applied over the substep, evaluated at the new velocity.
    vc_new = np.einsum("epcn,en->epc", Jc, new_vel)
    fn = np.maximum(0.0, fn_exp - cn * vc_new[..., 1])
    ft = ft_exp - ct * vc_new[..., 0]
    nf = model.n_feet
    n_foot_pts = 2 * nf
    foot_n = fn[:, :nf] + fn[:, nf:n_foot_pts]
    foot_t = ft[:, :nf] + ft[:, nf:n_foot_pts]
    coll = np.hypot(fn[:, n_foot_pts:], ft[:, n_foot_pts:])

    out = replace(
        state,
        pos=new_pos,
        vel=new_vel,
        tau=tau_exp - pd_coef * new_vel[:, N_BASE:],
        foot_force=foot_n,
        foot_tangent=foot_t,
        foot_contact=foot_n > p.contact_threshold,
        collision_force=coll,
        push_substeps=np.maximum(state.push_substeps - 1, 0),
    )
    out.push_force = np.where(out.push_substeps > 0, state.push_force, 0.0)
    return out


def env_step(
    model: WalkerModel,
    state: WalkerState,
    actions: np.ndarray,
    commands: np.ndarray,
    perturbation: Optional[StepPerturbation] = None,
) -> Tuple[WalkerState, StepSnapshot]:
    """One control step: delayed action -> PD targets -> substeps -> bookkeeping.

    ``actions`` are policy outputs; joint targets are
    ``q_default + action_scale * action``. ``perturbation`` fields may be
    per-environment arrays.
    """
    p = model.params
    E, D = state.pos.shape[0], model.dof
    actions = np.asarray(actions, dtype=float)
    if actions.shape != (E, D):
        raise ContractViolation(f"actions must be {(E, D)}, got {actions.shape}")
    commands = np.asarray(commands, dtype=float)

    delay = np.zeros(E, dtype=int)
    noise = None
    s = state
    if perturbation is not None:
        delay = np.broadcast_to(np.asarray(perturbation.delay_steps), (E,))
        noise = np.broadcast_to(np.asarray(perturbation.torque_noise, dtype=float), (E, D))
        force = np.broadcast_to(np.asarray(perturbation.push_force, dtype=float), (E,))
        if np.any(force != 0.0):
            s = apply_push(state, force, float(np.max(perturbation.push_duration)), p.dt)
    # Freshly reset environments have no action history: repeat the first frame.
    fresh = (state.step_count == 0)[:, None]
    hist1 = np.where(fresh, actions, state.prev_actions)
    hist2 = np.where(fresh, actions, state.prev_prev_actions)
    applied = np.where((delay >= 2)[:, None], hist2, actions)
    applied = np.where((delay == 1)[:, None], hist1, applied)
    q_target = model.q_default + model.morph.action_scale * applied
    drive = JointDrive(q_target, noise if noise is not None and np.any(noise) else None)

    prev_contact = state.foot_contact.copy()
    for _ in range(p.substeps):
        s = integrate(model, s, p.dt, drive=drive)

    sole_pos = model.point_positions(s.pos, model.sole)
    sole_vel = model.point_velocities(s.pos, s.vel, model.sole)
    foot_pts = model.point_positions(s.pos, model.foot_points)[..., 1]
    nf = model.n_feet
    foot_h = np.minimum(foot_pts[:, :nf], foot_pts[:, nf:])

    contact = s.foot_contact
    first = contact & ~prev_contact
    liftoff = ~contact & prev_contact
    air_before = state.air_time + p.control_dt
    touchdown_air = np.where(first, air_before, 0.0)
    swing_dx = np.where(first, sole_pos[..., 0] - state.swing_start_x, 0.0)
    air_time = np.where(contact, 0.0, air_before)
    swing_start = np.where(liftoff, sole_pos[..., 0], state.swing_start_x)

    t_prev = state.t
    s.t = state.t + p.control_dt
    s.air_time = air_time
    s.swing_start_x = swing_start
    prev_qd = state.qd.copy()
    prev_tau = np.where(fresh, s.tau, state.tau)
    s.prev_prev_actions = hist1.copy()
    s.prev_actions = actions.copy()
    s.prev_qd = prev_qd.copy()
    s.prev_tau = prev_tau.copy()
    s.step_count = state.step_count + 1
    fallen = (s.pos[:, 1] < p.fall_height_frac * model.nominal_height) | (np.abs(s.pos[:, 2]) > p.fall_pitch)

    snap = StepSnapshot(
        q=s.q.copy(),
        qd=s.qd.copy(),
        prev_qd=prev_qd,
        tau=s.tau.copy(),
        prev_tau=prev_tau,
        tau_max=model.tau_max,
        q_default=model.q_default,
        q_target=q_target,
        actions=actions.copy(),
        prev_actions=hist1,
        prev_prev_actions=hist2,
        torso_pos=s.pos[:, :N_BASE].copy(),
        torso_vel=s.vel[:, :N_BASE].copy(),
        foot_height=foot_h,
        foot_x=sole_pos[..., 0],
        foot_vel=sole_vel,
        foot_contact=contact.copy(),
        foot_force=s.foot_force.copy(),
        first_contact=first,
        touchdown_air_time=touchdown_air,
        swing_displacement=swing_dx,
        air_time=air_time.copy(),
        collision_force=s.collision_force.copy(),
        commands=commands,
        push_force=s.push_force.copy(),
        t=s.t.copy(),
        t_prev=t_prev.copy(),
        dt=p.control_dt,
        nominal_height=model.nominal_height,
        fallen=fallen,
    )
    return s, snap


def reset_snapshot(model: WalkerModel, state: WalkerState, commands: np.ndarray) -> StepSnapshot:
    """Snapshot of a freshly reset state, used for the first observation of an episode.

    History fields repeat the current frame; no touchdown has happened yet.
    """
    p = model.params
    E = state.pos.shape[0]
    sole_pos = model.point_positions(state.pos, model.sole)
    sole_vel = model.point_velocities(state.pos, state.vel, model.sole)
    foot_pts = model.point_positions(state.pos, model.foot_points)[..., 1]
    nf = model.n_feet
    zeros_f = np.zeros((E, nf))
    return StepSnapshot(
        q=state.q.copy(),
        qd=state.qd.copy(),
        prev_qd=state.qd.copy(),
        tau=state.tau.copy(),
        prev_tau=state.tau.copy(),
        tau_max=model.tau_max,
        q_default=model.q_default,
        q_target=np.repeat(model.q_default[None, :], E, axis=0),
        actions=state.prev_actions.copy(),
        prev_actions=state.prev_actions.copy(),
        prev_prev_actions=state.prev_prev_actions.copy(),
        torso_pos=state.pos[:, :N_BASE].copy(),
        torso_vel=state.vel[:, :N_BASE].copy(),
        foot_height=np.minimum(foot_pts[:, :nf], foot_pts[:, nf:]),
        foot_x=sole_pos[..., 0],
        foot_vel=sole_vel,
        foot_contact=state.foot_contact.copy(),
        foot_force=state.foot_force.copy(),
        first_contact=np.zeros((E, nf), dtype=bool),
        touchdown_air_time=zeros_f.copy(),
        swing_displacement=zeros_f.copy(),
        air_time=state.air_time.copy(),
        collision_force=state.collision_force.copy(),
        commands=np.asarray(commands, dtype=float),
        push_force=state.push_force.copy(),
        t=state.t.copy(),
        t_prev=state.t.copy(),
        dt=p.control_dt,
        nominal_height=model.nominal_height,
        fallen=np.zeros(E, dtype=bool),
    )
