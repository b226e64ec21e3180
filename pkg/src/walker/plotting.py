"""Self-contained SVG line plots for reward curves and joint-trajectory tracking."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from xml.sax.saxutils import escape

from .errors import ContractViolation
from .metrics import moving_average
from .nn import _atomic_write

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
REWARD_COLUMNS = ("iteration", "mean_reward")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    color: str
    dashed: bool = False


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + step * 1e-9, step)]


def render_svg(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
               width: int = 720, height: int = 420) -> str:
    left, right, top, bottom = 70, 20, 40, 55
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([s.x for s in series])
    ys = np.concatenate([s.y for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.1f}" y1="{top + ph}" x2="{px(t):.1f}" y2="{top + ph + 5}" stroke="#333"/>')
        out.append(f'<text x="{px(t):.1f}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{py(t):.1f}" x2="{left}" y2="{py(t):.1f}" stroke="#333"/>')
        out.append(f'<line x1="{left}" y1="{py(t):.1f}" x2="{left + pw}" y2="{py(t):.1f}" stroke="#eee"/>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for s in series:
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.x, s.y))
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(
            f'<polyline class="series" data-label="{escape(s.label)}" fill="none" stroke="{s.color}" '
            f'stroke-width="1.6"{dash} points="{pts}"/>'
        )
    for i, s in enumerate(series):
        ly = top + 14 + 16 * i
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(f'<line x1="{left + 10}" y1="{ly}" x2="{left + 34}" y2="{ly}" stroke="{s.color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{left + 40}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_csv_columns(path) -> Dict[str, List[str]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        rows = list(reader)
    if not header or not rows:
        raise ContractViolation(f"{path}: CSV is empty")
    return {name: [r[i] for r in rows] for i, name in enumerate(header)}


def reward_series(cols: Dict[str, List[str]], window: int = 51) -> List[Series]:
    """One smoothed curve per ``method`` value (or a single curve); seeds are averaged."""
    it = np.array([float(v) for v in cols["iteration"]])
    rew = np.array([float(v) for v in cols["mean_reward"]])
    labels = cols.get("method", ["reward"] * len(it))
    out = []
    for i, label in enumerate(dict.fromkeys(labels)):
        mask = np.array([l == label for l in labels])
        xs = np.unique(it[mask])
        ys = np.array([rew[mask & (it == x)].mean() for x in xs])
        w = min(window, len(ys))
        out.append(Series(label, xs, moving_average(ys, w), PALETTE[i % len(PALETTE)]))
    return out


def trajectory_series(cols: Dict[str, List[str]], episode: Optional[str] = None) -> List[Series]:
    """Hip-joint trajectories of one episode with their references as dashed lines."""
    eps = cols.get("episode")
    ep = episode if episode is not None else (eps[0] if eps else None)
    mask = np.array([e == ep for e in eps]) if eps else np.ones(len(cols["t"]), dtype=bool)
    t = np.array([float(v) for v in cols["t"]])[mask]
    hips = [c[2:] for c in cols if c.startswith("q.") and c.split(".")[-1] in ("hip", "hip_pitch")]
    out = []
    for i, name in enumerate(hips):
        color = PALETTE[i % len(PALETTE)]
        q = np.array([float(v) for v in cols[f"q.{name}"]])[mask]
        out.append(Series(f"{name}", t, q, color))
        if f"q_ref.{name}" in cols:
            ref = np.array([float(v) for v in cols[f"q_ref.{name}"]])[mask]
            out.append(Series(f"{name} reference", t, ref, color, dashed=True))
    return out


def plot_csv(input_path, out_path) -> str:
    """Detect the CSV kind, render it and write the SVG; returns the kind."""
    cols = read_csv_columns(input_path)
    if all(c in cols for c in REWARD_COLUMNS):
        svg = render_svg(reward_series(cols), "Reward growth", "iteration", "mean episodic reward (smoothed)")
        kind = "reward"
    elif "t" in cols and any(c.startswith("q.") for c in cols):
        series = trajectory_series(cols)
        if not series:
            raise ContractViolation(f"{input_path}: trajectory CSV has no hip joint columns (q.<leg>.hip)")
        svg = render_svg(series, "Hip joint tracking", "time (s)", "joint angle (rad)")
        kind = "trajectory"
    else:
        have = set(cols)
        missing_reward = [c for c in REWARD_COLUMNS if c not in have]
        missing_traj = [c for c in ("t", "q.<joint>") if c not in have]
        raise ContractViolation(
            f"{input_path}: unrecognized CSV; a reward log needs columns {missing_reward}, "
            f"a trajectory needs {missing_traj}"
        )
    _atomic_write(Path(out_path), svg.encode("utf-8"))
    return kind
