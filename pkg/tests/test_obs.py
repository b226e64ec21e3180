import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import kstest

from walker.errors import ContractViolation
from walker.obs import (
    AgentId,
    CommandRanges,
    CriticLayout,
    ObservationLayout,
    build_agent_obs,
    build_critic_obs,
    build_group_input,
    sample_commands,
    stance_mask,
    temporal_director,
)
from walker.vecenv import VecWalkerEnv, spawn_rngs

from conftest import random_snapshot

LEFT_LEG, RIGHT_LEG = AgentId("legs", "left"), AgentId("legs", "right")


def test_temporal_director_examples():
    assert temporal_director(0.0, 1.5, 0.0) == 0.0
    assert temporal_director(0.25 / 1.5, 1.5, 0.0) == pytest.approx(1.0, abs=1e-15)
    t = np.linspace(0, 4, 1001)
    np.testing.assert_allclose(temporal_director(t, 1.5, 0.5), -temporal_director(t, 1.5, 0.0), atol=1e-12)


@given(st.floats(0, 100), st.floats(0.2, 3), st.floats(0, 1))
def test_temporal_director_period(t, k, offset):
    assert temporal_director(t + 1 / k, k, offset) == pytest.approx(temporal_director(t, k, offset), abs=1e-9)


def test_stance_mask_examples():
    t = np.linspace(0.001, 2.0, 997)
    mask = stance_mask(t, 1.5, [0.0, 0.5])
    clocks = temporal_director(t[:, None], 1.5, np.array([0.0, 0.5]))
    nonzero = np.all(np.abs(clocks) > 1e-12, axis=1)
    assert np.all(mask[nonzero].sum(axis=1) == 1)
    assert stance_mask(0.3, 1.5, [0.0, 0.5], standing=1.0).tolist() == [True, True]


def test_stance_duty_cycle():
    dt, k = 1 / 60, 1.5
    t = np.arange(0, 1 / k, dt)
    mask = stance_mask(t, k, [0.0, 0.5])
    half = len(t) / 2
    assert np.all(np.abs(mask.sum(axis=0) - half) <= 1)


def test_paper_dims_widths(paper):
    legs = ObservationLayout(paper.leg_dof)
    arms = ObservationLayout(paper.arm_dof)
    assert (legs.width, arms.width) == (32, 26)
    assert CriticLayout(paper.dof_total).width == 106


def test_planar_widths(planar):
    assert ObservationLayout(planar.leg_dof).width == 23
    assert CriticLayout(planar.dof_total).width == 66
    v = np.arange(23.0)[None]
    g = build_group_input(v, v)
    assert g.shape == (1, 46)
    np.testing.assert_array_equal(g[0, :23], v[0])
    np.testing.assert_array_equal(g[0, 23:], v[0])
    with pytest.raises(ContractViolation):
        build_group_input(v, v[:, :5])


def test_agent_obs_contents(planar):
    rng = np.random.default_rng(0)
    snap = random_snapshot(rng, 5, planar.dof_total)
    layout = ObservationLayout(3)
    left = layout.unpack(build_agent_obs(snap, LEFT_LEG, layout, planar))
    right = layout.unpack(build_agent_obs(snap, RIGHT_LEG, layout, planar))
    sl = planar.joint_slices()
    np.testing.assert_array_equal(left["q"], snap.q[:, sl["left_leg"]])
    np.testing.assert_array_equal(right["qd"], snap.qd[:, sl["right_leg"]])
    np.testing.assert_array_equal(left["prev_action"], snap.actions[:, sl["left_leg"]])
    np.testing.assert_array_equal(left["agent_id"], np.tile([1.0, 0.0], (5, 1)))
    np.testing.assert_array_equal(right["agent_id"], np.tile([0.0, 1.0], (5, 1)))
    np.testing.assert_array_equal(left["euler"][:, 1], snap.torso_pos[:, 2])
    assert np.all(left["euler"][:, [0, 2]] == 0) and np.all(left["ang_vel"][:, [0, 2]] == 0)
    np.testing.assert_array_equal(left["commands"], snap.commands)
    np.testing.assert_allclose(left["phase"][:, 0], -left["phase"][:, 1], atol=1e-12)


def test_identical_inputs_give_identical_vectors(planar):
    snap = random_snapshot(np.random.default_rng(1), 3, planar.dof_total)
    layout = ObservationLayout(3)
    a = build_agent_obs(snap, LEFT_LEG, layout, planar)
    b = build_agent_obs(snap, LEFT_LEG, layout, planar)
    np.testing.assert_array_equal(a, b)


def test_noise_spares_exact_fields(planar):
    snap = random_snapshot(np.random.default_rng(2), 4, planar.dof_total)
    layout = ObservationLayout(3)
    clean = layout.unpack(build_agent_obs(snap, LEFT_LEG, layout, planar))
    noisy = layout.unpack(build_agent_obs(snap, LEFT_LEG, layout, planar, 0.1, np.random.default_rng(0)))
    for name in ("agent_id", "commands", "phase"):
        np.testing.assert_array_equal(noisy[name], clean[name])
    assert not np.allclose(noisy["q"], clean["q"])
    with pytest.raises(ContractViolation):
        build_agent_obs(snap, LEFT_LEG, layout, planar, 0.1, None)


def test_layout_mismatch_and_missing_limb(planar):
    snap = random_snapshot(np.random.default_rng(3), 2, planar.dof_total)
    with pytest.raises(ContractViolation):
        build_agent_obs(snap, LEFT_LEG, ObservationLayout(4), planar)
    legs_only = type(planar)(planar.name, planar.legs, [])
    with pytest.raises(ContractViolation):
        build_agent_obs(snap, AgentId("arms", "left"), ObservationLayout(2), legs_only)
    with pytest.raises(ContractViolation):
        AgentId("legs", "middle").one_hot


def test_critic_obs_contents(planar):
    snap = random_snapshot(np.random.default_rng(4), 3, planar.dof_total)
    snap.push_force[:] = 0.0
    layout = CriticLayout(planar.dof_total)
    priv = {"friction": np.array([0.2, 0.5, 1.1]), "mass": np.array([29.0, 30.0, 31.0])}
    obs = layout.unpack(build_critic_obs(snap, priv, layout, planar))
    np.testing.assert_array_equal(obs["pos_error"], snap.q_target - snap.q)
    np.testing.assert_array_equal(obs["friction"][:, 0], priv["friction"])
    np.testing.assert_array_equal(obs["mass"][:, 0], priv["mass"])
    assert np.all(obs["push_force"] == 0) and np.all(obs["push_torque"] == 0)
    np.testing.assert_array_equal(obs["lin_vel"][:, 0], snap.torso_vel[:, 0])
    np.testing.assert_array_equal(obs["lin_vel"][:, 2], snap.torso_vel[:, 1])
    np.testing.assert_array_equal(obs["contact"], snap.foot_contact.astype(float))


def test_env_observation_shapes(paper):
    env = VecWalkerEnv(paper, 2, spawn_rngs(0, 2))
    env.reset()
    assert env.agent_obs(LEFT_LEG).shape == (2, 32)
    assert env.agent_obs(AgentId("arms", "right")).shape == (2, 26)
    assert env.critic_obs().shape == (2, 106)


def test_sample_commands():
    rng = np.random.default_rng(0)
    always = CommandRanges(standing_probability=1.0)
    assert sample_commands(rng, always).tolist() == [1.0, 0.0, 0.0, 0.0]
    ranges = CommandRanges(standing_probability=0.0, vy=(-1, 1), yaw_rate=(-1, 1))
    draws = np.stack([sample_commands(rng, ranges) for _ in range(10000)])
    assert np.all(draws[:, 2] == 0) and np.all(draws[:, 3] == 0)
    lo, hi = ranges.vx
    assert kstest((draws[:, 1] - lo) / (hi - lo), "uniform").statistic < 0.02
    full = CommandRanges(standing_probability=0.0, vy=(-1, 1), yaw_rate=(-1, 1), planar=False)
    assert np.any(sample_commands(rng, full)[2:] != 0)
