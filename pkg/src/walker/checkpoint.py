"""Checkpoints: float32 parameter blob plus a JSON manifest describing what it belongs to."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .config import RunConfig
from .errors import CheckpointMismatch, ContractViolation
from .nn import load_tensors, save_tensors
from .obs import CriticLayout, ObservationLayout
from .ppo import AgentRoster, Networks, ValueNormalizer, build_roster, init_networks

CHECKPOINT_FORMAT = 1


def layouts_for(cfg: RunConfig) -> dict:
    morph = cfg.morph()
    out = {f"{l.side}_{l.group}": ObservationLayout(l.dof).describe() for l in morph.limbs}
    out["critic"] = CriticLayout(morph.dof_total).describe()
    return out


def save_checkpoint(path, cfg: RunConfig, roster: AgentRoster, nets: Networks, iteration: int,
                    rng_state: Optional[dict] = None) -> dict:
    extra = {
        "format": CHECKPOINT_FORMAT,
        "iteration": int(iteration),
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "morphology": cfg.morph().to_dict(),
        "layouts": layouts_for(cfg),
        "roster": roster.describe(),
        "value_norm": nets.value_norm.to_dict(),
        "rng_state": _jsonable(rng_state),
    }
    return save_tensors(path, nets.named_tensors(roster), extra)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def load_checkpoint(path, expected: Optional[RunConfig] = None) -> Tuple[RunConfig, AgentRoster, Networks, dict]:
    """Load parameters and rebuild the networks they belong to.

    With ``expected`` given, a checkpoint trained for a different morphology,
    mode, algorithm or observation layout is refused.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    try:
        named, manifest = load_tensors(path)
    except ContractViolation as exc:
        raise CheckpointMismatch(str(exc)) from None
    cfg = RunConfig.from_dict(manifest["config"])
    if cfg.hash() != manifest.get("config_hash"):
        raise CheckpointMismatch("manifest config hash does not match its embedded config")
    if manifest.get("layouts") != layouts_for(cfg) or manifest.get("morphology") != cfg.morph().to_dict():
        raise CheckpointMismatch("checkpoint layouts do not match its morphology preset")
    if expected is not None:
        for key in ("morphology", "mode", "algorithm"):
            if getattr(expected, key) != getattr(cfg, key):
                raise CheckpointMismatch(
                    f"checkpoint {key} is {getattr(cfg, key)!r}, expected {getattr(expected, key)!r}"
                )
        if layouts_for(expected) != manifest["layouts"]:
            raise CheckpointMismatch("checkpoint observation layouts differ from the requested configuration")
    morph = cfg.morph()
    roster = build_roster(morph, cfg.mode, cfg.algorithm, cfg.trainer.per_limb)
    nets = init_networks(roster, CriticLayout(morph.dof_total).width, cfg.trainer, np.random.default_rng(0))
    try:
        nets.load_named(roster, named)
    except ContractViolation as exc:
        raise CheckpointMismatch(str(exc)) from None
    vn = manifest.get("value_norm", {})
    nets.value_norm = ValueNormalizer(**vn) if vn else ValueNormalizer()
    return cfg, roster, nets, manifest
