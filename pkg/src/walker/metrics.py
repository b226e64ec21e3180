"""Locomotion evaluation metrics: convergence time, action smoothness, torso
stability and left/right limb coordination, plus gait-phase extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import AperiodicGait, InsufficientData


@dataclass
class RewardCurve:
    values: np.ndarray  # per-iteration mean episodic reward
    window: int = 51

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size == 0:
            raise InsufficientData("reward curve is empty")
        if self.window < 1:
            raise ValueError("smoothing window must be >= 1")


@dataclass
class StabilityWeights:
    height: float = 1.0  # 1/m^2
    angle: float = 1.0  # 1/rad^2

    def __post_init__(self):
        if self.height < 0 or self.angle < 0:
            raise ValueError("stability weights must be >= 0")


@dataclass
class GaitPhaseSeries:
    left: np.ndarray  # rad
    right: np.ndarray  # rad
    target: float = np.pi

    def __post_init__(self):
        self.left = wrap_angle(np.asarray(self.left, dtype=float))
        self.right = wrap_angle(np.asarray(self.right, dtype=float))


def wrap_angle(x):
    """Wrap to (-pi, pi]; exact multiples of 2*pi map to exactly 0."""
    x = np.asarray(x, dtype=float)
    turns = np.ceil(x / (2.0 * np.pi) - 0.5)
    y = x - turns * (2.0 * np.pi)
    return np.minimum(np.where(y <= -np.pi, y + 2.0 * np.pi, y), np.pi)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average; near the ends the window shrinks to the available samples."""
    x = np.asarray(x, dtype=float)
    n = x.size
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(x)])
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + half + 1, 0, n)
    return (c[hi] - c[lo]) / (hi - lo)


def convergence_time(curve: RewardCurve, fraction: float = 0.95) -> int:
    """First 1-based iteration from which the smoothed curve stays at or above
    ``fraction`` of its asymptote (mean of the final 10%).

    For a negative asymptote the band is taken on its magnitude, i.e. the
    threshold is ``asym - (1 - fraction) * |asym|``. Returns the curve length
    if the curve never settles.
    """
    v = curve.values
    if v.size < curve.window:
        raise InsufficientData(f"curve has {v.size} points, smoothing window is {curve.window}")
    if np.all(v == v[0]):
        return 1
    smooth = moving_average(v, curve.window)
    tail = max(1, int(np.ceil(0.1 * v.size)))
    asym = smooth[-tail:].mean()
    threshold = asym - (1.0 - fraction) * abs(asym)
    below = np.flatnonzero(smooth < threshold)
    if below.size == 0:
        return 1
    if below[-1] == v.size - 1:
        return int(v.size)
    return int(below[-1] + 2)


def action_smoothness(actions, order: int = 1) -> float:
    """``(1/T) * sum_t sum_i (a_{i,t+1} - a_{i,t})^2``; ``order=2`` uses second differences."""
    a = np.asarray(actions, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    T = a.shape[0]
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if T < order + 1:
        raise InsufficientData(f"need at least {order + 1} action frames, got {T}")
    d = np.diff(a, n=order, axis=0)
    return float(np.sum(d * d) / T)


def torso_stability(heights, orientations, weights: Optional[StabilityWeights] = None) -> float:
    """``w_h * Var(h) + w_theta * sum_c Var(theta_c)`` with population variances."""
    w = weights or StabilityWeights()
    h = np.asarray(heights, dtype=float).ravel()
    th = np.asarray(orientations, dtype=float)
    if th.ndim == 1:
        th = th[:, None]
    if h.size < 2 or th.shape[0] < 2:
        raise InsufficientData("torso stability needs at least two samples")
    # Shifting by the first sample keeps constant series at exactly zero variance.
    return float(w.height * np.var(h - h[0]) + w.angle * np.sum(np.var(th - th[0], axis=0)))


def limb_coordination(phases: GaitPhaseSeries) -> float:
    """Mean absolute wrapped deviation of the left/right phase difference from its target."""
    if phases.left.shape != phases.right.shape:
        raise ValueError("left and right phase series must be aligned")
    if phases.left.size == 0:
        raise InsufficientData("empty phase series")
    return float(np.mean(np.abs(wrap_angle(phases.left - phases.right - phases.target))))


def dominant_frequency(x, dt: float, peak_ratio: float = 3.0) -> float:
    """Frequency (Hz) of the strongest spectral peak of a zero-mean signal.

    Raises ``AperiodicGait`` when the peak power is below ``peak_ratio`` times
    the median of the spectrum.
    """
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = x.size
    if n < 4 or np.allclose(x, 0.0, atol=1e-12):
        raise AperiodicGait("trajectory has no variation")
    nfft = 1 << int(np.ceil(np.log2(8 * n)))
    power = np.abs(np.fft.rfft(x * np.hanning(n), nfft)) ** 2
    power[0] = 0.0
    k = int(np.argmax(power))
    if power[k] < peak_ratio * np.median(power[1:]):
        raise AperiodicGait("no dominant periodic component")
    if 0 < k < power.size - 1:
        # Parabolic refinement on log power.
        a, b, c = np.log(power[k - 1 : k + 2] + 1e-300)
        denom = a - 2 * b + c
        k = k + (0.5 * (a - c) / denom if denom != 0 else 0.0)
    return float(k / (nfft * dt))


def extract_phase(joint_traj, dt: float, min_cycles: float = 2.0, peak_ratio: float = 3.0) -> Tuple[np.ndarray, float]:
    """Instantaneous phase of a roughly periodic joint trajectory.

    The phase is ``atan2(x(t), x(t + P/4))`` with ``P`` the dominant period,
    so ``sin(2*pi*f*t)`` yields ``2*pi*f*t`` (wrapped). Near the end, where
    ``t + P/4`` leaves the record, ``-x(t - P/4)`` stands in for the forward
    shift. Returns ``(phase, frequency)``.
    """
    x = np.asarray(joint_traj, dtype=float)
    x = x - x.mean()
    f = dominant_frequency(x, dt, peak_ratio)
    n = x.size
    if f * n * dt < min_cycles:
        raise InsufficientData(f"trajectory covers {f * n * dt:.2f} cycles, need {min_cycles}")
    return quadrature_phase(x, f, dt), f


def quadrature_phase(x, frequency: float, dt: float) -> np.ndarray:
    """Wrapped ``atan2(x(t), x(t + P/4))`` for a known period ``P = 1/frequency``."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = x.size
    if n < 2:
        return np.zeros(n)
    shift = 0.25 / (frequency * dt)  # samples
    idx = np.arange(n, dtype=float)
    grid = np.arange(n)
    quad = np.where(idx + shift <= n - 1, np.interp(idx + shift, grid, x), -np.interp(idx - shift, grid, x))
    return wrap_angle(np.arctan2(x, quad))
