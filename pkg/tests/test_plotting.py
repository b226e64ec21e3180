import xml.etree.ElementTree as ET

import numpy as np
import pytest

from walker.config import RunConfig
from walker.errors import ContractViolation
from walker.evaluation import run_episodes, write_trajectory_csv
from walker.plotting import plot_csv
from walker.ppo import build_roster

SVG = "{http://www.w3.org/2000/svg}"


def series(svg_path):
    root = ET.parse(svg_path).getroot()
    return [p for p in root.iter(f"{SVG}polyline") if p.get("class") == "series"]


def test_two_method_reward_plot(tmp_path):
    src = tmp_path / "curves.csv"
    lines = ["method,seed,iteration,mean_reward"]
    for m, scale in (("mash", 2.0), ("single", 1.0)):
        for s in (0, 1):
            for i in range(1, 61):
                lines.append(f"{m},{s},{i},{scale * np.log(i) + s}")
    src.write_text("\n".join(lines) + "\n")
    out = tmp_path / "r.svg"
    assert plot_csv(src, out) == "reward"
    polys = series(out)
    assert [p.get("data-label") for p in polys] == ["mash", "single"]
    assert all(len(p.get("points").split()) == 60 for p in polys)


def test_single_run_log_plot(tmp_path):
    src = tmp_path / "train_log.csv"
    src.write_text("iteration,mean_reward,entropy\n1,0.5,1\n2,0.7,1\n3,0.9,1\n")
    out = tmp_path / "r.svg"
    plot_csv(src, out)
    assert len(series(out)) == 1


def test_trajectory_plot_has_dashed_reference(tmp_path):
    cfg = RunConfig()
    morph = cfg.morph()
    roster = build_roster(morph, cfg.mode, cfg.algorithm, False)
    eps = run_episodes(cfg, roster, None, 1, 0, policy="zero", steps=40)
    src = tmp_path / "traj.csv"
    write_trajectory_csv(src, eps, morph)
    out = tmp_path / "t.svg"
    assert plot_csv(src, out) == "trajectory"
    polys = series(out)
    dashed = [p for p in polys if p.get("stroke-dasharray")]
    solid = [p for p in polys if not p.get("stroke-dasharray")]
    assert len(dashed) == len(solid) == 2
    assert all("reference" in p.get("data-label") for p in dashed)


def test_empty_csv_errors_without_output(tmp_path):
    src = tmp_path / "empty.csv"
    src.write_text("iteration,mean_reward\n")
    out = tmp_path / "x.svg"
    with pytest.raises(ContractViolation, match="empty"):
        plot_csv(src, out)
    assert not out.exists()


def test_unknown_schema_names_missing_columns(tmp_path):
    src = tmp_path / "odd.csv"
    src.write_text("iteration,loss\n1,2\n")
    out = tmp_path / "x.svg"
    with pytest.raises(ContractViolation, match="mean_reward"):
        plot_csv(src, out)
    assert not out.exists()
