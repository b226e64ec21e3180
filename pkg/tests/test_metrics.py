import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from walker.errors import AperiodicGait, InsufficientData
from walker.metrics import (
    GaitPhaseSeries,
    RewardCurve,
    StabilityWeights,
    action_smoothness,
    convergence_time,
    dominant_frequency,
    extract_phase,
    limb_coordination,
    moving_average,
    torso_stability,
    wrap_angle,
)

finite = st.floats(-10, 10, allow_nan=False)


def test_action_smoothness_hand_cases():
    assert action_smoothness([0.0, 1.0, 0.0, 1.0]) == 0.75
    assert action_smoothness(np.ones((5, 3))) == 0.0
    assert action_smoothness([0.0, 1.0, 0.0, 1.0], order=2) == pytest.approx((4 + 4) / 4)
    with pytest.raises(InsufficientData):
        action_smoothness([1.0])
    with pytest.raises(ValueError):
        action_smoothness([1.0, 2.0], order=3)


@given(arrays(float, (6, 2), elements=finite), finite, st.floats(-3, 3))
def test_action_smoothness_shift_and_scale(a, c, k):
    base = action_smoothness(a)
    assert action_smoothness(a + c) == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert action_smoothness(k * a) == pytest.approx(k * k * base, rel=1e-9, abs=1e-9)
    assert base >= 0


def test_torso_stability_hand_cases():
    assert torso_stability([0.9, 1.1], [0.0, 0.0]) == pytest.approx(0.01)
    assert torso_stability([1.0] * 5, [0.2] * 5) == 0.0
    assert torso_stability([0.9, 1.1], [0.0, 0.2], StabilityWeights(2.0, 0.5)) == pytest.approx(0.02 + 0.005)
    with pytest.raises(InsufficientData):
        torso_stability([1.0], [0.0])
    with pytest.raises(ValueError):
        StabilityWeights(-1.0, 1.0)


@given(arrays(float, 8, elements=finite), arrays(float, 8, elements=st.floats(-1, 1)), finite)
def test_torso_stability_shift_invariant(h, th, c):
    base = torso_stability(h, th)
    assert torso_stability(h + c, th + c) == pytest.approx(base, rel=1e-6, abs=1e-9)
    assert base >= 0


def test_limb_coordination_hand_cases():
    t = np.linspace(0, 3, 200)
    phase = wrap_angle(2 * np.pi * 1.5 * t)
    assert limb_coordination(GaitPhaseSeries(phase, phase - np.pi)) == pytest.approx(0.0, abs=1e-12)
    assert limb_coordination(GaitPhaseSeries(phase, phase)) == pytest.approx(np.pi)


@given(arrays(float, 10, elements=st.floats(-20, 20)), st.integers(-3, 3), st.floats(-np.pi, np.pi))
def test_limb_coordination_wrap_invariance(phi, k, target):
    c = limb_coordination(GaitPhaseSeries(phi + target + 2 * np.pi * k, phi, target))
    assert c == pytest.approx(0.0, abs=1e-9)


@given(st.floats(-100, 100))
def test_wrap_range(x):
    w = float(wrap_angle(x))
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(x)) and np.isclose(np.sin(w), np.sin(x), atol=1e-9)


def test_wrap_pi_boundary():
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)


def test_moving_average_edges():
    x = np.arange(10.0)
    np.testing.assert_allclose(moving_average(x, 3), [0.5, 1, 2, 3, 4, 5, 6, 7, 8, 8.5])
    np.testing.assert_allclose(moving_average(x, 1), x)


def test_convergence_time_cases():
    assert convergence_time(RewardCurve(np.full(200, 3.0))) == 1
    step = np.r_[np.zeros(500), np.ones(1000)]
    tc = convergence_time(RewardCurve(step, 51))
    assert abs(tc - 500) <= 51
    # Negative asymptote: the band is taken on its magnitude.
    neg = np.r_[np.full(300, -10.0), np.full(700, -1.0)]
    assert abs(convergence_time(RewardCurve(neg, 51)) - 300) <= 51
    never = np.linspace(100.0, 1.0, 500)  # still falling at the end
    assert convergence_time(RewardCurve(never, 51)) == never.size
    with pytest.raises(InsufficientData):
        convergence_time(RewardCurve(np.arange(10.0), 51))
    with pytest.raises(InsufficientData):
        RewardCurve(np.array([]))


def test_phase_of_pure_sinusoid():
    dt, f = 1 / 60, 1.5
    t = np.arange(0, 4, dt)
    phase, fe = extract_phase(np.sin(2 * np.pi * f * t), dt)
    assert fe == pytest.approx(f, rel=0.01)
    mid = slice(len(t) // 4, 3 * len(t) // 4)
    err = wrap_angle(phase - 2 * np.pi * f * t)[mid]
    assert np.max(np.abs(err)) < 0.05


def test_relative_phase_of_antiphase_pair():
    dt, f = 1 / 60, 1.5
    t = np.arange(0, 4, dt)
    pl, _ = extract_phase(np.sin(2 * np.pi * f * t), dt)
    pr, _ = extract_phase(np.sin(2 * np.pi * f * t + np.pi), dt)
    rel = wrap_angle(pl - pr)
    mid = slice(len(t) // 4, 3 * len(t) // 4)
    assert np.max(np.abs(np.abs(rel[mid]) - np.pi)) < 0.05


def test_phase_errors():
    with pytest.raises(AperiodicGait):
        extract_phase(np.full(200, 0.3), 1 / 60)
    noise = np.random.default_rng(0).standard_normal(2048)
    with pytest.raises(AperiodicGait):
        dominant_frequency(noise, 1 / 60, peak_ratio=1e6)
    t = np.arange(0, 1, 1 / 60)
    with pytest.raises(InsufficientData):
        extract_phase(np.sin(2 * np.pi * 1.0 * t), 1 / 60)
