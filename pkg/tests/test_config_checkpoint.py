import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from walker.checkpoint import load_checkpoint, save_checkpoint
from walker.config import RunConfig, smoke_config
from walker.errors import CheckpointMismatch, ConfigurationError
from walker.ppo import TrainerConfig, build_roster, init_networks
from walker.obs import CriticLayout


@given(
    seed=st.integers(0, 2**64 - 1),
    mode=st.sampled_from(["bipedal", "arm-swing"]),
    algorithm=st.sampled_from(["mash", "single-agent-ppo"]),
    lr=st.floats(1e-6, 1e-2),
)
def test_config_json_round_trip(seed, mode, algorithm, lr):
    cfg = RunConfig(seed=seed, mode=mode, algorithm=algorithm, trainer=TrainerConfig(lr=lr))
    back = RunConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.hash() == cfg.hash()


def test_hash_changes_with_content():
    a = RunConfig()
    b = RunConfig(seed=1)
    assert a.hash() != b.hash()
    assert len(a.hash()) == 64


def test_unknown_key_rejected():
    d = RunConfig().to_dict()
    d["learning_rate"] = 1.0
    with pytest.raises(ConfigurationError, match="learning_rate"):
        RunConfig.from_dict(d)


def test_missing_schema_version_rejected():
    d = RunConfig().to_dict()
    del d["schema_version"]
    with pytest.raises(ConfigurationError, match="schema_version"):
        RunConfig.from_dict(d)


def test_future_schema_version_rejected():
    d = RunConfig().to_dict()
    d["schema_version"] = 99
    with pytest.raises(ConfigurationError, match="schema version"):
        RunConfig.from_dict(d)


@pytest.mark.parametrize("seed", [-1, 2**64, 1.5, "3"])
def test_bad_seed_rejected(seed):
    with pytest.raises(ConfigurationError, match="seed"):
        RunConfig(seed=seed)


@pytest.mark.parametrize(
    "key,value", [("mode", "quadruped"), ("algorithm", "sac"), ("morphology", "octopus")]
)
def test_bad_enum_rejected(key, value):
    with pytest.raises(ConfigurationError, match=value):
        RunConfig(**{key: value})


def test_bad_section_rejected():
    d = RunConfig().to_dict()
    d["sim"]["bogus"] = 1
    with pytest.raises(ConfigurationError, match="bogus"):
        RunConfig.from_dict(d)


def test_invalid_json_rejected():
    with pytest.raises(ConfigurationError, match="JSON"):
        RunConfig.from_json("{not json")


def test_smoke_config_budget():
    cfg = smoke_config()
    assert cfg.trainer.n_envs == 8 and cfg.trainer.iterations == 20
    assert cfg.evaluation.episodes == 4


def _nets(cfg, seed=3):
    morph = cfg.morph()
    roster = build_roster(morph, cfg.mode, cfg.algorithm, cfg.trainer.per_limb)
    nets = init_networks(roster, CriticLayout(morph.dof_total).width, cfg.trainer, np.random.default_rng(seed))
    for actor in nets.actors:
        actor.log_std[:] = -0.3
    return roster, nets


@pytest.mark.parametrize("mode,algorithm", [("bipedal", "mash"), ("arm-swing", "mash"), ("bipedal", "single-agent-ppo")])
def test_checkpoint_round_trip(tmp_path, mode, algorithm):
    cfg = RunConfig(mode=mode, algorithm=algorithm, seed=5)
    roster, nets = _nets(cfg)
    nets.value_norm.update(np.array([1.0, 2.0, 4.0]))
    path = tmp_path / "ck.bin"
    save_checkpoint(path, cfg, roster, nets, 7, {"k": np.int64(3)})
    cfg2, roster2, nets2, manifest = load_checkpoint(path, expected=cfg)
    assert cfg2 == cfg
    assert manifest["iteration"] == 7
    assert roster2.describe() == roster.describe()
    a, b = nets.named_tensors(roster), nets2.named_tensors(roster2)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(np.asarray(a[k], np.float32), b[k])
    assert nets2.value_norm.to_dict() == nets.value_norm.to_dict()


@pytest.fixture
def saved(tmp_path):
    cfg = RunConfig()
    roster, nets = _nets(cfg)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, cfg, roster, nets, 1)
    return path, cfg


@pytest.mark.parametrize(
    "field,value",
    [("morphology", "paper-dims"), ("mode", "arm-swing"), ("algorithm", "single-agent-ppo")],
)
def test_checkpoint_refuses_other_setup(saved, field, value):
    path, cfg = saved
    other = RunConfig(**{field: value})
    with pytest.raises(CheckpointMismatch, match=field):
        load_checkpoint(path, expected=other)


def test_checkpoint_corrupted_blob(saved):
    path, _ = saved
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointMismatch, match="hash"):
        load_checkpoint(path)


def test_checkpoint_edited_config(saved):
    path, _ = saved
    mpath = path.with_name(path.name + ".json")
    manifest = json.loads(mpath.read_text())
    manifest["config"]["seed"] = 99
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointMismatch, match="config hash"):
        load_checkpoint(path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.bin")
