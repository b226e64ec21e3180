"""Multi-agent PPO with shared-parameter group actors and a multi-head centralized
critic, plus the single-agent PPO baseline on the same machinery.

Terminology used below:

* an *agent* is one limb (left leg, right arm, ...) with its own observation;
* a *policy group* owns one actor network; its input is the concatenation of
  its member agents' observations (or, in per-limb mode, one member at a time);
* a *slot* is the unit of the importance ratio and advantage: one per limb
  agent for MAPPO, a single slot covering every joint for the baseline. Slot
  ``k`` reads critic head ``k``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractViolation, TrainingDivergence
from .morphology import MorphologyConfig
from .nn import (
    LOG_2PI,
    LOG_STD_MAX,
    LOG_STD_MIN,
    AdamState,
    GaussianHead,
    GaussianPolicyNet,
    MlpParams,
    adam_step,
    clip_by_global_norm,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
)
from .obs import AgentId, CriticLayout, ObservationLayout

MODES = ("bipedal", "arm-swing")
ALGORITHMS = ("mash", "single-agent-ppo")


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.005
    value_coef: float = 1.0
    max_grad_norm: float = 1.0
    iterations: int = 3000
    n_envs: int = 256
    horizon: int = 48  # control steps per episode and per rollout
    actor_hidden: Tuple[int, ...] = (256, 256, 256)
    critic_hidden: Tuple[int, ...] = (512, 512, 512)
    init_log_std: float = 0.0
    actor_output_gain: float = 0.01
    per_limb: bool = False  # one agent's observation per actor call instead of the group concatenation
    strict_shared_advantage: bool = False  # every slot uses the head-averaged advantage
    obs_noise: float = 0.0
    checkpoint_every: int = 100

    def __post_init__(self):
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.clip_eps <= 0:
            raise ConfigurationError("clip epsilon must be positive")
        if self.epochs < 1 or self.minibatches < 1 or self.n_envs < 1 or self.horizon < 1:
            raise ConfigurationError("epochs, minibatches, n_envs and horizon must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Roster


@dataclass
class PolicyGroup:
    name: str
    agents: List[AgentId]
    obs_widths: List[int]
    act_widths: List[int]
    joint_index: np.ndarray  # full-body joint index of every output column (concatenated order)
    per_limb: bool = False

    @property
    def in_dim(self) -> int:
        return self.obs_widths[0] if self.per_limb else sum(self.obs_widths)

    @property
    def out_dim(self) -> int:
        return self.act_widths[0] if self.per_limb else sum(self.act_widths)

    @property
    def action_width(self) -> int:
        """Width of the group's full action (all members)."""
        return sum(self.act_widths)


@dataclass
class PolicySlot:
    name: str
    group: int
    cols: slice  # columns of the group's full action
    head: int


@dataclass
class AgentRoster:
    mode: str
    algorithm: str
    agents: List[AgentId]
    groups: List[PolicyGroup]
    slots: List[PolicySlot]
    dof_total: int

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_heads(self) -> int:
        return len(self.slots)

    def describe(self) -> dict:
        return {
            "mode": self.mode,
            "algorithm": self.algorithm,
            "agents": [f"{a.side}_{a.group}" for a in self.agents],
            "groups": [
                {"name": g.name, "in_dim": g.in_dim, "out_dim": g.out_dim, "per_limb": g.per_limb,
                 "joints": g.joint_index.tolist()}
                for g in self.groups
            ],
            "slots": [{"name": s.name, "group": s.group, "head": s.head} for s in self.slots],
        }


def build_roster(morph: MorphologyConfig, mode: str, algorithm: str = "mash", per_limb: bool = False) -> AgentRoster:
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    group_names = ["legs"] if mode == "bipedal" else ["legs", "arms"]
    if "arms" in group_names and not morph.arms:
        raise ConfigurationError("arm-swing mode needs a morphology with arms")
    slices = morph.joint_slices()
    members: Dict[str, list] = {}
    for g in group_names:
        limbs = morph.legs_ordered if g == "legs" else morph.arms_ordered
        members[g] = [(AgentId(g, l.side), l) for l in limbs]
    agents = [a for g in group_names for a, _ in members[g]]

    def joint_idx(limbs):
        return np.concatenate([np.arange(slices[l.name].start, slices[l.name].stop) for l in limbs])

    def widths(pairs):
        return [ObservationLayout(l.dof).width for _, l in pairs], [l.dof for _, l in pairs]

    groups, slots = [], []
    if algorithm == "mash":
        for gi, g in enumerate(group_names):
            ow, aw = widths(members[g])
            limbs = [l for _, l in members[g]]
            groups.append(PolicyGroup(g, [a for a, _ in members[g]], ow, aw, joint_idx(limbs), per_limb))
            start = 0
            for (a, l) in members[g]:
                slots.append(PolicySlot(f"{a.side}_{g}", gi, slice(start, start + l.dof), len(slots)))
                start += l.dof
    else:
        if per_limb:
            raise ConfigurationError("the single-agent baseline has no per-limb mode")
        pairs = [p for g in group_names for p in members[g]]
        ow, aw = widths(pairs)
        groups.append(PolicyGroup("body", agents, ow, aw, joint_idx([l for _, l in pairs])))
        slots.append(PolicySlot("body", 0, slice(0, sum(aw)), 0))
    return AgentRoster(mode, algorithm, agents, groups, slots, morph.dof_total)


# ---------------------------------------------------------------------------
# Networks


@dataclass
class ValueNormalizer:
    """Running mean/variance of value targets; the critic regresses standardized returns."""

    mean: float = 0.0
    var: float = 1.0
    count: float = 0.0

    @property
    def std(self) -> float:
        return max(math.sqrt(self.var), 1e-6)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        n = float(x.size)
        if n == 0:
            return
        m, v = float(x.mean()), float(x.var())
        if self.count == 0:
            self.mean, self.var, self.count = m, v, n
            return
        total = self.count + n
        delta = m - self.mean
        self.mean += delta * n / total
        self.var = (self.var * self.count + v * n + delta * delta * self.count * n / total) / total
        self.count = total

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "var": self.var, "count": self.count}


@dataclass
class Networks:
    actors: List[GaussianPolicyNet]
    critic: MlpParams
    value_norm: ValueNormalizer = field(default_factory=ValueNormalizer)

    def named_tensors(self, roster: AgentRoster) -> Dict[str, np.ndarray]:
        out = {}
        for g, actor in zip(roster.groups, self.actors):
            out.update(zip(actor.tensor_names(f"actor.{g.name}"), actor.tensors()))
        out.update(zip(self.critic.tensor_names("critic"), self.critic.tensors()))
        return out

    def load_named(self, roster: AgentRoster, named: Dict[str, np.ndarray]) -> None:
        mine = self.named_tensors(roster)
        missing = set(mine) - set(named)
        if missing:
            raise ContractViolation(f"checkpoint lacks tensors {sorted(missing)}")
        for name, t in mine.items():
            src = named[name]
            if src.shape != t.shape:
                raise ContractViolation(f"tensor {name}: checkpoint {src.shape} vs model {t.shape}")
            t[...] = src


def init_networks(roster: AgentRoster, critic_in: int, cfg: TrainerConfig, rng: np.random.Generator,
                  dtype=np.float32) -> Networks:
    actors = []
    for g in roster.groups:
        mlp = init_mlp([g.in_dim, *cfg.actor_hidden, g.out_dim], rng, output_gain=cfg.actor_output_gain, dtype=dtype)
        log_std = np.full(g.out_dim, cfg.init_log_std, dtype=np.float64)
        actors.append(GaussianPolicyNet(mlp, log_std))
    critic = init_mlp([critic_in, *cfg.critic_hidden, roster.n_heads], rng, output_gain=1.0, dtype=dtype)
    return Networks(actors, critic)


def group_mean(group: PolicyGroup, mlp: MlpParams, x: np.ndarray, cached: bool = False):
    """Action mean over the group's full action width, ``(B, action_width)``."""
    B = x.shape[0]
    xin = x.reshape(B * len(group.agents), group.in_dim) if group.per_limb else x
    if cached:
        out, cache = mlp_forward_cached(mlp, xin)
        return out.reshape(B, group.action_width).astype(np.float64), (xin, cache)
    return mlp_forward(mlp, xin).reshape(B, group.action_width).astype(np.float64)


def group_log_std(group: PolicyGroup, actor: GaussianPolicyNet) -> np.ndarray:
    ls = np.clip(actor.log_std, LOG_STD_MIN, LOG_STD_MAX)
    return np.tile(ls, len(group.agents)) if group.per_limb else ls


def group_head(group: PolicyGroup, actor: GaussianPolicyNet, x: np.ndarray) -> GaussianHead:
    return GaussianHead(group_mean(group, actor.mlp, x), group_log_std(group, actor))


def critic_values(critic: MlpParams, critic_obs: np.ndarray, n_heads: Optional[int] = None,
                  norm: Optional[ValueNormalizer] = None) -> np.ndarray:
    """Per-slot values ``(..., n_heads)``, in return units when ``norm`` is given."""
    if n_heads is not None and critic.out_dim != n_heads:
        raise ContractViolation(f"critic has {critic.out_dim} heads, roster needs {n_heads}")
    raw = mlp_forward(critic, critic_obs).astype(np.float64)
    return raw if norm is None else norm.denormalize(raw)


# ---------------------------------------------------------------------------
# Objective pieces


def per_agent_log_prob(head: GaussianHead, joint_action: np.ndarray, agent_slice: slice) -> np.ndarray:
    """Log-density of one agent's share of a factorized group action."""
    width = head.mean.shape[-1]
    start = 0 if agent_slice.start is None else agent_slice.start
    stop = width if agent_slice.stop is None else agent_slice.stop
    if agent_slice.step not in (None, 1) or not 0 <= start < stop <= width:
        raise ContractViolation(f"agent slice {agent_slice} out of bounds for a {width}-wide action")
    mean = head.mean[..., agent_slice]
    log_std = head.log_std[agent_slice]
    a = np.asarray(joint_action, dtype=np.float64)[..., agent_slice]
    z = (a - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def clipped_surrogate(ratio, advantage, eps: float):
    """Elementwise ``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``."""
    if eps <= 0:
        raise ContractViolation("clip epsilon must be positive")
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalized advantage estimates along the leading time axis.

    ``rewards``/``dones`` are ``(T, ...)``, ``values`` ``(T, ...)`` and
    ``bootstrap`` the value after the last step. A done at ``t`` cuts the
    recursion and the bootstrap from ``t + 1``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    bootstrap = np.asarray(bootstrap, dtype=np.float64)
    if rewards.shape != values.shape or dones.shape != rewards.shape:
        raise ContractViolation(f"rewards {rewards.shape}, values {values.shape}, dones {dones.shape} misaligned")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(bootstrap)
    for t in range(T - 1, -1, -1):
        next_v = bootstrap if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-8 else 1.0)


# ---------------------------------------------------------------------------
# Rollouts


@dataclass
class RolloutBuffer:
    group_inputs: List[np.ndarray]  # per group (T, E, in_total)
    actions: List[np.ndarray]  # per group (T, E, action_width)
    log_probs: np.ndarray  # (T, E, S) behaviour log-probabilities per slot
    values: np.ndarray  # (T, E, S)
    rewards: np.ndarray  # (T, E) shared team reward
    dones: np.ndarray  # (T, E)
    bootstrap: np.ndarray  # (E, S) values of the observation after step T
    critic_obs: np.ndarray  # (T, E, critic_in)
    reward_terms: Dict[str, float] = field(default_factory=dict)  # mean scaled value per term
    displacement: float = 0.0  # mean torso x travel per environment over the rollout
    falls: int = 0
    advantages: Optional[np.ndarray] = None  # (T, E, S)
    returns: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[1]


def gather_group_inputs(env, roster: AgentRoster) -> List[np.ndarray]:
    obs = {a: env.agent_obs(a, getattr(env, "obs_rng", None)) for a in roster.agents}
    return [np.concatenate([obs[a] for a in g.agents], axis=-1) for g in roster.groups]


def act(roster: AgentRoster, nets: Networks, inputs: List[np.ndarray], rng: Optional[np.random.Generator],
        deterministic: bool = False):
    """Sample (or take the mean of) every group's action.

    Returns per-group actions, the per-slot log-probabilities ``(E, S)`` and
    the full-body action ``(E, D)`` with inactive joints at zero.
    """
    E = inputs[0].shape[0]
    full = np.zeros((E, roster.dof_total))
    group_actions, heads = [], []
    for g, actor, x in zip(roster.groups, nets.actors, inputs):
        head = group_head(g, actor, x)
        if deterministic:
            a = head.mean.copy()
        else:
            a = head.mean + head.std * rng.standard_normal(head.mean.shape)
        group_actions.append(a)
        heads.append(head)
        full[:, g.joint_index] = a
    logp = np.stack(
        [per_agent_log_prob(heads[s.group], group_actions[s.group], s.cols) for s in roster.slots], axis=-1
    )
    return group_actions, logp, full


def collect_rollouts(env, roster: AgentRoster, nets: Networks, cfg: TrainerConfig,
                     rng: np.random.Generator, deterministic: bool = False) -> RolloutBuffer:
    """Reset every environment and run one ``cfg.horizon``-step episode batch.

    Fallen environments restart inside the batch with ``done`` set on their
    final transition; the last step is a time-limit truncation and is
    bootstrapped from the critic.
    """
    T, E, S = cfg.horizon, env.n_envs, roster.n_heads
    env.reset()
    start_x = env.state.torso_x.copy()
    travelled = np.zeros(E)
    inputs_t = [np.zeros((T, E, g.in_dim * (len(g.agents) if g.per_limb else 1))) for g in roster.groups]
    actions_t = [np.zeros((T, E, g.action_width)) for g in roster.groups]
    logp_t = np.zeros((T, E, S))
    rewards = np.zeros((T, E))
    dones = np.zeros((T, E))
    critic_in = env.critic_layout.width
    critic_obs = np.zeros((T + 1, E, critic_in))
    term_sums: Dict[str, float] = {}
    falls = 0
    for t in range(T):
        inputs = gather_group_inputs(env, roster)
        critic_obs[t] = env.critic_obs()
        group_actions, logp, full = act(roster, nets, inputs, rng, deterministic)
        result = env.step(full)
        for gi in range(len(roster.groups)):
            inputs_t[gi][t] = inputs[gi]
            actions_t[gi][t] = group_actions[gi]
        logp_t[t] = logp
        rewards[t] = result.reward.total
        dones[t] = result.done
        falls += int(result.done.sum())
        travelled += result.displacement
        for k, v in result.reward.scaled.items():
            term_sums[k] = term_sums.get(k, 0.0) + float(v.mean())
    critic_obs[T] = env.critic_obs()
    travelled += env.state.torso_x - env.start_x
    values_all = critic_values(nets.critic, critic_obs.reshape((T + 1) * E, critic_in), S, nets.value_norm).reshape(T + 1, E, S)
    if not np.all(np.isfinite(values_all)):
        raise TrainingDivergence("critic produced non-finite values during collection")
    return RolloutBuffer(
        group_inputs=inputs_t,
        actions=actions_t,
        log_probs=logp_t,
        values=values_all[:T],
        rewards=rewards,
        dones=dones,
        bootstrap=values_all[T],
        critic_obs=critic_obs[:T],
        reward_terms={k: v / T for k, v in term_sums.items()},
        displacement=float(travelled.mean()),
        falls=falls,
    )


def finish_buffer(buf: RolloutBuffer, cfg: TrainerConfig) -> RolloutBuffer:
    """Attach per-slot advantages and return targets."""
    S = buf.values.shape[-1]
    rewards = np.repeat(buf.rewards[..., None], S, axis=-1)
    dones = np.repeat(buf.dones[..., None], S, axis=-1)
    if cfg.strict_shared_advantage:
        v = buf.values.mean(axis=-1, keepdims=True)
        b = buf.bootstrap.mean(axis=-1, keepdims=True)
        adv, ret = compute_gae(buf.rewards[..., None], v, buf.dones[..., None], b, cfg.gamma, cfg.gae_lambda)
        buf.advantages = np.repeat(adv, S, axis=-1)
        buf.returns = np.repeat(ret, S, axis=-1)
    else:
        buf.advantages, buf.returns = compute_gae(rewards, buf.values, dones, buf.bootstrap, cfg.gamma, cfg.gae_lambda)
    return buf


# ---------------------------------------------------------------------------
# Losses and gradients


@dataclass
class Batch:
    """Flattened samples for one optimization step."""

    group_inputs: List[np.ndarray]  # (B, in_total)
    actions: List[np.ndarray]  # (B, action_width)
    old_log_probs: np.ndarray  # (B, S)
    advantages: np.ndarray  # (B, S), already normalized
    returns: np.ndarray  # (B, S)
    critic_obs: np.ndarray  # (B, critic_in)


def flatten_buffer(buf: RolloutBuffer, normalize: bool = True) -> Batch:
    T, E = buf.horizon, buf.n_envs
    n = T * E
    adv = buf.advantages.reshape(n, -1)
    if normalize:
        adv = normalize_advantages(adv)
    return Batch(
        group_inputs=[x.reshape(n, -1) for x in buf.group_inputs],
        actions=[a.reshape(n, -1) for a in buf.actions],
        old_log_probs=buf.log_probs.reshape(n, -1),
        advantages=adv,
        returns=buf.returns.reshape(n, -1),
        critic_obs=buf.critic_obs.reshape(n, -1),
    )


def take(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(
        [x[idx] for x in batch.group_inputs],
        [a[idx] for a in batch.actions],
        batch.old_log_probs[idx],
        batch.advantages[idx],
        batch.returns[idx],
        batch.critic_obs[idx],
    )


@dataclass
class LossValues:
    policy: float
    value: float
    entropy: float
    total: float
    ratios: np.ndarray  # (B, S)
    clip_fraction: float
    approx_kl: float


@dataclass
class Gradients:
    actors: List[Tuple[MlpParams, np.ndarray]]  # (mlp grads, log_std grad) per group
    critic: MlpParams


def _slot_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


def mappo_loss(roster: AgentRoster, nets: Networks, batch: Batch, cfg: TrainerConfig,
               with_grads: bool = True) -> Tuple[LossValues, Optional[Gradients]]:
    """Summed per-slot clipped surrogate, entropy bonus and mean-over-heads value loss.

    The value error is measured against standardized returns (see
    :class:`ValueNormalizer`).

    Loss = -(sum_k mean_b surr_k) - c_ent * sum_k H_k + c_v * mean_k mean_b (V_k - R_k)^2.
    """
    B = batch.advantages.shape[0]
    eps = cfg.clip_eps
    means, caches, log_stds = [], [], []
    for g, actor, x in zip(roster.groups, nets.actors, batch.group_inputs):
        m, cache = group_mean(g, actor.mlp, x, cached=True)
        means.append(m)
        caches.append(cache)
        log_stds.append(group_log_std(g, actor))

    surr_terms, entropies, ratios, clipped = [], [], [], []
    mean_grads = [np.zeros_like(m) for m in means]
    log_std_grads = [np.zeros_like(ls) for ls in log_stds]
    kl_terms = []
    for k, s in enumerate(roster.slots):
        mean = means[s.group][:, s.cols]
        log_std = log_stds[s.group][s.cols]
        a = batch.actions[s.group][:, s.cols]
        std = np.exp(log_std)
        z = (a - mean) / std
        logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)
        log_ratio = logp - batch.old_log_probs[:, k]
        ratio = np.exp(log_ratio)
        adv = batch.advantages[:, k]
        unclipped = ratio * adv
        clipped_obj = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        surr_terms.append(np.mean(np.minimum(unclipped, clipped_obj)))
        entropies.append(_slot_entropy(log_std))
        ratios.append(ratio)
        clipped.append(np.abs(ratio - 1.0) > eps)
        kl_terms.append(np.mean((ratio - 1.0) - log_ratio))
        if with_grads:
            # d(-mean surr)/d logp, nonzero only where the unclipped branch is the minimum.
            active = unclipped <= clipped_obj
            dlogp = np.where(active, -adv * ratio / B, 0.0)
            mean_grads[s.group][:, s.cols] += dlogp[:, None] * z / std
            log_std_grads[s.group][s.cols] += np.sum(dlogp[:, None] * (z * z - 1.0), axis=0)
            log_std_grads[s.group][s.cols] -= cfg.entropy_coef

    policy = -sum(surr_terms)
    entropy = sum(entropies)

    values, vcache = mlp_forward_cached(nets.critic, batch.critic_obs)
    values = values.astype(np.float64)
    err = values - nets.value_norm.normalize(batch.returns)
    value = float(np.mean(np.mean(err * err, axis=0)))
    total = policy - cfg.entropy_coef * entropy + cfg.value_coef * value
    ratio_arr = np.stack(ratios, axis=-1)
    lv = LossValues(
        policy=float(policy),
        value=value,
        entropy=float(entropy),
        total=float(total),
        ratios=ratio_arr,
        clip_fraction=float(np.mean(np.stack(clipped, axis=-1))),
        approx_kl=float(np.mean(kl_terms)),
    )
    if not np.isfinite(lv.total):
        raise TrainingDivergence("non-finite loss")
    if not with_grads:
        return lv, None

    actor_grads = []
    for g, actor, cache, mg, lg in zip(roster.groups, nets.actors, caches, mean_grads, log_std_grads):
        xin, c = cache
        out_grad = mg.reshape(c[-1].shape)
        gmlp, _ = mlp_backward(actor.mlp, xin, out_grad.astype(actor.mlp.dtype), c)
        if g.per_limb:
            lg = lg.reshape(len(g.agents), g.out_dim).sum(axis=0)
        actor_grads.append((gmlp, lg))
    dv = cfg.value_coef * 2.0 * err / err.size
    gcritic, _ = mlp_backward(nets.critic, batch.critic_obs, dv.astype(nets.critic.dtype), vcache)
    return lv, Gradients(actor_grads, gcritic)


def ppo_loss(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray, old_log_prob: np.ndarray,
             advantages: np.ndarray, values: np.ndarray, returns: np.ndarray, cfg: TrainerConfig):
    """Plain single-policy PPO loss terms: (policy, value, entropy, total).

    Written independently of :func:`mappo_loss` as the reference for the
    one-agent reduction.
    """
    std = np.exp(log_std)
    z = (actions - mean) / std
    logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)
    ratio = np.exp(logp - old_log_prob)
    surr = np.minimum(ratio * advantages, np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages)
    policy = -np.mean(surr)
    entropy = float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
    err = values - returns
    value = float(np.mean(np.mean(err * err, axis=0)))
    total = policy - cfg.entropy_coef * entropy + cfg.value_coef * value
    return float(policy), value, entropy, float(total)


# ---------------------------------------------------------------------------
# Update


@dataclass
class OptimizerState:
    actors: List[AdamState]
    critic: AdamState


def init_optimizer(nets: Networks, cfg: TrainerConfig) -> OptimizerState:
    return OptimizerState(
        [AdamState.for_params(a.tensors(), lr=cfg.lr) for a in nets.actors],
        AdamState.for_params(nets.critic.tensors(), lr=cfg.lr),
    )


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    mean_ratio: float
    max_ratio: float
    first_ratio_dev: float  # max |ratio - 1| on the first minibatch before any step
    clip_fraction: float
    approx_kl: float
    explained_variance: float
    actor_grad_norm: float
    critic_grad_norm: float


def explained_variance(pred: np.ndarray, target: np.ndarray) -> float:
    var = np.var(target)
    return float("nan") if var == 0 else float(1.0 - np.var(target - pred) / var)


def apply_gradients(roster: AgentRoster, nets: Networks, grads: Gradients, opt: OptimizerState,
                    cfg: TrainerConfig) -> Tuple[float, float]:
    """Clip each network's gradient by global norm, then take one Adam step on each."""
    actor_norms = []
    for gi, (g, actor) in enumerate(zip(roster.groups, nets.actors)):
        gm, gls = grads.actors[gi]
        tensors = gm.tensors() + [gls]
        actor_norms.append(clip_by_global_norm(tensors, cfg.max_grad_norm))
        adam_step(opt.actors[gi], actor.tensors(), tensors, actor.tensor_names(f"actor.{g.name}"))
        actor.project()
    gc = grads.critic.tensors()
    critic_norm = clip_by_global_norm(gc, cfg.max_grad_norm)
    adam_step(opt.critic, nets.critic.tensors(), gc, nets.critic.tensor_names("critic"))
    return float(max(actor_norms) if actor_norms else 0.0), critic_norm


def mappo_update(buf: RolloutBuffer, roster: AgentRoster, nets: Networks, opt: OptimizerState,
                 cfg: TrainerConfig, rng: np.random.Generator) -> UpdateStats:
    if buf.advantages is None:
        finish_buffer(buf, cfg)
    nets.value_norm.update(buf.returns)
    batch = flatten_buffer(buf)
    n = batch.advantages.shape[0]
    acc = {k: [] for k in ("policy", "value", "entropy", "ratio", "max_ratio", "clip", "kl", "an", "cn")}
    first_dev = None
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for mb_i, idx in enumerate(np.array_split(perm, cfg.minibatches)):
            mb = take(batch, idx)
            try:
                lv, grads = mappo_loss(roster, nets, mb, cfg)
            except TrainingDivergence as exc:
                raise TrainingDivergence(f"epoch {epoch} minibatch {mb_i}: {exc}") from exc
            if first_dev is None:
                first_dev = float(np.max(np.abs(lv.ratios - 1.0)))
            an, cn = apply_gradients(roster, nets, grads, opt, cfg)
            acc["policy"].append(lv.policy)
            acc["value"].append(lv.value)
            acc["entropy"].append(lv.entropy)
            acc["ratio"].append(float(lv.ratios.mean()))
            acc["max_ratio"].append(float(lv.ratios.max()))
            acc["clip"].append(lv.clip_fraction)
            acc["kl"].append(lv.approx_kl)
            acc["an"].append(an)
            acc["cn"].append(cn)
    return UpdateStats(
        policy_loss=float(np.mean(acc["policy"])),
        value_loss=float(np.mean(acc["value"])),
        entropy=float(np.mean(acc["entropy"])),
        mean_ratio=float(np.mean(acc["ratio"])),
        max_ratio=float(np.max(acc["max_ratio"])),
        first_ratio_dev=float(first_dev),
        clip_fraction=float(np.mean(acc["clip"])),
        approx_kl=float(np.mean(acc["kl"])),
        explained_variance=explained_variance(buf.values.ravel(), buf.returns.ravel()),
        actor_grad_norm=float(np.mean(acc["an"])),
        critic_grad_norm=float(np.mean(acc["cn"])),
    )
