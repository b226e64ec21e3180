"""Acceptance criteria 1-11; each test prints one PASS/FAIL line and the
session summary repeats them under "acceptance criteria"."""

import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from walker.cli import compare_configs
from walker.checkpoint import load_checkpoint
from walker.config import RunConfig, smoke_config
from walker.domain_rand import INIT_PARAMS, RandomizationTable, delay_to_steps, sample_init_randomization, sample_step_randomization
from walker.evaluation import METRIC_NAMES, run_episodes
from walker.metrics import GaitPhaseSeries, RewardCurve, action_smoothness, convergence_time, limb_coordination, moving_average, torso_stability
from walker.morphology import preset
from walker.obs import CriticLayout, ObservationLayout, stance_mask, temporal_director
from walker.ppo import (
    TrainerConfig,
    build_roster,
    clipped_surrogate,
    collect_rollouts,
    compute_gae,
    critic_values,
    group_mean,
    init_networks,
    init_optimizer,
    mappo_loss,
    mappo_update,
    ppo_loss,
)
from walker.rewards import TERMS, RewardConfig, compute_reward_terms, reference_signals
from walker.trainer import read_log, train_run
from walker.vecenv import VecWalkerEnv, spawn_rngs

import conftest
from conftest import random_snapshot
from oracles import SCALES, brute_force_gae, naive_terms
from test_ppo import batch_for, check_gradients, perturb_actors, setup

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(n: int, title: str, budget_s: float):
    """Time the block, enforce the runtime budget and record one summary line."""
    t0 = time.perf_counter()
    detail = {}
    try:
        yield detail
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"runtime {elapsed:.1f}s exceeds {budget_s:g}s"
    except AssertionError as exc:
        elapsed = time.perf_counter() - t0
        line = f"criterion {n}: FAIL  {title} ({elapsed:.1f}s) {exc}".splitlines()[0]
        conftest.ACCEPTANCE.append(line)
        print(line)
        raise
    extra = " ".join(f"{k}={v}" for k, v in detail.items())
    line = f"criterion {n}: PASS  {title} ({elapsed:.1f}s) {extra}".rstrip()
    conftest.ACCEPTANCE.append(line)
    print(line)


def test_criterion_01_dimension_contracts():
    with criterion(1, "dimension contracts", 1.0):
        paper = preset("paper-dims")
        assert ObservationLayout(paper.leg_dof).width == 32
        assert ObservationLayout(paper.arm_dof).width == 26
        assert CriticLayout(paper.dof_total).width == 106
        roster = build_roster(paper, "arm-swing", "mash")
        legs, arms = roster.groups
        assert (legs.in_dim, arms.in_dim) == (64, 52)
        assert (legs.out_dim, arms.out_dim) == (12, 8)
        nets = init_networks(roster, 106, TrainerConfig(), np.random.default_rng(0))
        v = critic_values(nets.critic, np.zeros((3, 106)), n_heads=roster.n_heads)
        assert v.shape == (3, 4)


def test_criterion_02_reward_formulas():
    with criterion(2, "reward formulas vs naive oracle", 5.0) as d:
        planar = preset("planar-walker")
        assert RewardConfig().scales == SCALES and len(TERMS) == 16
        snap = random_snapshot(np.random.default_rng(2024), 100, planar.dof_total)
        out = compute_reward_terms(snap, reference_signals(snap, planar), RewardConfig())
        worst = 0.0
        for e in range(100):
            ref = naive_terms(snap, e, planar)
            for k in TERMS:
                for got, want in ((out.unscaled[k][e], ref[k]), (out.scaled[k][e], SCALES[k] * ref[k])):
                    err = abs(got - want) / max(1.0, abs(want))
                    worst = max(worst, err)
        assert worst <= 1e-9, f"worst error {worst:.2e}"
        # Feet contact number: +1 per matching leg, -0.3 per mismatching leg.
        refs = reference_signals(snap, planar)
        refs.stance = np.tile([[True, False]], (100, 1))
        snap.foot_contact = np.tile([[True, True]], (100, 1))
        fcn = compute_reward_terms(snap, refs, RewardConfig()).unscaled["feet_contact_number"]
        assert np.all(fcn == 1.0 - 0.3)
        d["worst_err"] = f"{worst:.1e}"


def test_criterion_03_gradients():
    with criterion(3, "loss gradients vs central differences", 30.0) as d:
        planar = preset("planar-walker")
        worst = 0.0
        for mode, algorithm in (("arm-swing", "mash"), ("bipedal", "single-agent-ppo")):
            cfg, roster, env, nets, rng = setup(
                planar, mode, algorithm, dtype=np.float64, actor_hidden=(64, 32), critic_hidden=(64, 32)
            )
            batch = batch_for(cfg, roster, env, nets, rng)
            perturb_actors(nets, rng)
            worst = max(worst, check_gradients(roster, nets, batch, cfg, np.random.default_rng(7), per_tensor=8))
        assert worst < 1e-4, f"relative error {worst:.2e}"
        d["rel_err"] = f"{worst:.1e}"


def test_criterion_04_gae_oracle():
    with criterion(4, "GAE vs brute force", 5.0) as d:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            T = int(rng.integers(1, 64))
            r, v = rng.standard_normal(T), rng.standard_normal(T)
            done = (rng.random(T) < 0.1).astype(float)
            boot = float(rng.standard_normal())
            gamma, lam = rng.uniform(0.9, 1.0), rng.uniform(0.8, 1.0)
            adv, _ = compute_gae(r, v, done, boot, gamma, lam)
            worst = max(worst, float(np.max(np.abs(adv - brute_force_gae(r, v, done, boot, gamma, lam)))))
        assert worst <= 1e-10, f"max abs error {worst:.2e}"
        d["max_err"] = f"{worst:.1e}"


def test_criterion_05_ppo_identities():
    with criterion(5, "PPO identities", 60.0) as d:
        planar = preset("planar-walker")
        assert clipped_surrogate(1.5, 1.0, 0.2) == 1.2
        worst = 0.0
        for mode, algorithm in (("arm-swing", "mash"), ("bipedal", "mash"), ("bipedal", "single-agent-ppo")):
            cfg, roster, env, nets, rng = setup(planar, mode, algorithm)
            opt = init_optimizer(nets, cfg)
            for _ in range(3):
                stats = mappo_update(collect_rollouts(env, roster, nets, cfg, rng), roster, nets, opt, cfg, rng)
                worst = max(worst, stats.first_ratio_dev)
        assert worst <= 1e-6, f"first-step ratio deviation {worst:.2e}"
        cfg, roster, env, nets, rng = setup(planar, "bipedal", "single-agent-ppo")
        batch = batch_for(cfg, roster, env, nets, rng)
        perturb_actors(nets, rng)
        lv, _ = mappo_loss(roster, nets, batch, cfg, with_grads=False)
        mean = group_mean(roster.groups[0], nets.actors[0].mlp, batch.group_inputs[0])
        ref = ppo_loss(
            mean,
            np.clip(nets.actors[0].log_std, -5.0, 1.0),
            batch.actions[0],
            batch.old_log_probs[:, 0],
            batch.advantages[:, 0],
            critic_values(nets.critic, batch.critic_obs),
            nets.value_norm.normalize(batch.returns),
            cfg,
        )
        assert (lv.policy, lv.value, lv.entropy, lv.total) == ref, "N=1 loss differs from single-agent PPO"
        d["ratio_dev"] = f"{worst:.1e}"


def test_criterion_06_director_and_stance():
    with criterion(6, "temporal director and stance masks", 5.0) as d:
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(2000):
            t, k, off = rng.uniform(0, 100), rng.uniform(0.2, 3.0), rng.uniform(0, 1)
            worst = max(worst, abs(temporal_director(t + 1 / k, k, off) - temporal_director(t, k, off)))
        assert worst <= 1e-9, f"periodicity error {worst:.2e}"
        t = rng.uniform(0, 20, 5000)
        left, right = temporal_director(t, 1.5, 0.0), temporal_director(t, 1.5, 0.5)
        assert np.array_equal(right, -left), "antiphase directors are not exact negations"
        mask = stance_mask(t, 1.5, [0.0, 0.5])
        nonzero = left != 0
        assert np.all(mask[nonzero, 0] != mask[nonzero, 1]), "stance masks are not complementary"
        d["period_err"] = f"{worst:.1e}"


def test_criterion_07_randomization_containment():
    with criterion(7, "randomization containment", 120.0) as d:
        from scipy.stats import kstest

        table = RandomizationTable()
        n = 100_000
        rng = np.random.default_rng(7)
        draws = [sample_init_randomization(table, rng) for _ in range(n)]
        worst = 0.0
        for name in INIT_PARAMS:
            lo, hi = table.ranges[name]
            vals = np.array([getattr(o, name) for o in draws])
            assert vals.min() >= lo and vals.max() <= hi, f"{name} left its range"
            worst = max(worst, kstest((vals - lo) / (hi - lo), "uniform").statistic)
        # Push magnitudes come from the step sampler; force a push on every call.
        always = RandomizationTable(push_probability=1.0)
        tmax = np.ones(6)
        steps = [sample_step_randomization(always, rng, 0.0, tmax, 1 / 60) for _ in range(n)]
        lo, hi = always.ranges["push_force"]
        pushes = np.array([s.push_force for s in steps])
        assert pushes.min() >= lo and pushes.max() <= hi
        worst = max(worst, kstest((pushes - lo) / (hi - lo), "uniform").statistic)
        dlo, dhi = always.ranges["motor_delay_ms"]
        delays = np.array([s.delay_steps for s in steps])
        assert delays.min() >= delay_to_steps(dlo, 1 / 60) and delays.max() <= delay_to_steps(dhi, 1 / 60)
        assert worst < 0.02, f"KS statistic {worst:.4f}"
        # Init/step phase separation: physics stays fixed within an episode.
        planar = preset("planar-walker")
        env = VecWalkerEnv(planar, 4, spawn_rngs(0, 4), table=RandomizationTable(push_probability=0.2), auto_reset=False)
        env.reset()
        before = {k: v.copy() for k, v in env.model.phys.items()}
        for _ in range(20):
            env.step(np.zeros((4, planar.dof_total)))
            for k in before:
                assert np.array_equal(env.model.phys[k], before[k]), f"{k} changed mid-episode"
        d["max_ks"] = f"{worst:.4f}"


def test_criterion_08_metric_formulas():
    with criterion(8, "metric formulas", 5.0) as d:
        assert action_smoothness(np.array([0.0, 1.0, 0.0, 1.0])) == 0.75
        h = np.pi / 2
        left = np.array([0.0, h, -h, np.pi, h / 2])
        right = np.array([np.pi, -h, h, 0.0, h / 2 - np.pi])
        assert limb_coordination(GaitPhaseSeries(left, right, np.pi)) == 0.0
        assert torso_stability(np.full(50, 0.6), np.full(50, 0.1)) == 0.0
        curve = np.r_[np.zeros(500), np.ones(500)]
        got = convergence_time(RewardCurve(curve, 51))
        assert abs(got - 500) <= 51, f"T_Conv {got}"
        d["t_conv_step500"] = got


def monotone_fraction(rewards, smooth=51, span=100):
    """Fraction of sliding ``span``-iteration windows over which the smoothed curve does not drop."""
    s = moving_average(np.asarray(rewards, dtype=float), smooth)
    if s.size <= span:
        return 0.0
    return float(np.mean(s[span:] >= s[:-span]))


def test_criterion_09_learning_smoke(tmp_path):
    with criterion(9, "learning smoke test", 1800.0) as d:
        seeds = (0, 1, 2)
        mash, rand, fractions = [], [], []
        for seed in seeds:
            cfg = RunConfig(
                name=f"smoke9_seed{seed}",
                seed=seed,
                output_dir=str(tmp_path),
                trainer=TrainerConfig(n_envs=64, iterations=400, checkpoint_every=0),
            )
            train_run(cfg, cfg.run_dir, deterministic=True)
            fractions.append(monotone_fraction(read_log(cfg.run_dir / "train_log.csv")["mean_reward"]))
            c, roster, nets, _ = load_checkpoint(cfg.run_dir / "checkpoints" / "final.bin")
            mash += [e.displacement for e in run_episodes(c, roster, nets, 50, seed, "mean")]
            rand += [e.displacement for e in run_episodes(c, roster, None, 50, seed, "random")]
        m, r = float(np.mean(mash)), float(np.mean(rand))
        d.update(mash_disp=f"{m:.3f}", random_disp=f"{r:.3f}", monotone=[round(f, 3) for f in fractions])
        print(f"criterion 9 detail: {d}")
        assert m > 0 and m > 5 * abs(r), f"displacement MASH {m:.3f} m vs random {r:.3f} m"
        assert all(f >= 0.8 for f in fractions), f"monotone window fractions {fractions}"


def test_criterion_10_comparison_harness(tmp_path):
    with criterion(10, "comparison harness", 600.0) as d:
        a = smoke_config(name="mash")
        b = replace(smoke_config(name="single-agent-ppo"), algorithm="single-agent-ppo")
        b.validate()
        summary = compare_configs(a, b, [0, 1, 2], tmp_path / "cmp")
        for label in ("mash", "single-agent-ppo"):
            metrics = summary["methods"][label]["metrics"]
            for m in METRIC_NAMES:
                assert metrics[m] is not None and np.isfinite(metrics[m]), f"{label} lacks {m}"
        for f in ("comparison.md", "comparison.json", "reward_curves.csv"):
            assert (tmp_path / "cmp" / f).exists()
        d["methods"] = ",".join(summary["methods"])


def test_criterion_11_determinism(tmp_path):
    with criterion(11, "deterministic smoke runs", 300.0):
        cfg = smoke_config()
        for run in ("a", "b"):
            train_run(cfg, tmp_path / run, deterministic=True)
        for rel in ("train_log.csv", "checkpoints/final.bin", "checkpoints/final.bin.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), f"{rel} differs"
