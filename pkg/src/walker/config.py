"""Run configuration: one JSON document describing a complete experiment."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from .domain_rand import RandomizationTable
from .errors import ConfigurationError
from .morphology import PRESETS, MorphologyConfig, preset
from .obs import CommandRanges
from .ppo import ALGORITHMS, MODES, TrainerConfig
from .rewards import RewardConfig
from .sim import SimParams

SCHEMA_VERSION = 1


@dataclass
class EvalConfig:
    episodes: int = 50
    episode_steps: int = 240  # 4 s at 60 Hz, enough cycles for phase extraction
    command: List[float] = field(default_factory=lambda: [0.0, 0.6, 0.0, 0.0])
    randomize: bool = False  # nominal physics during evaluation
    seed_offset: int = 10_000  # evaluation streams never coincide with training streams

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**d)


@dataclass
class RunConfig:
    name: str = "run"
    mode: str = "bipedal"
    algorithm: str = "mash"
    morphology: str = "planar-walker"
    seed: int = 0
    output_dir: str = "runs"
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    randomization: RandomizationTable = field(default_factory=RandomizationTable)
    commands: CommandRanges = field(default_factory=CommandRanges)
    sim: SimParams = field(default_factory=SimParams)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.morphology not in PRESETS:
            raise ConfigurationError(f"unknown morphology preset {self.morphology!r}; known: {sorted(PRESETS)}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"config schema version {self.schema_version} is not supported (expected {SCHEMA_VERSION})"
            )

    def morph(self) -> MorphologyConfig:
        return preset(self.morphology)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "mode": self.mode,
            "algorithm": self.algorithm,
            "morphology": self.morphology,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "trainer": self.trainer.to_dict(),
            "reward": self.reward.to_dict(),
            "randomization": self.randomization.to_dict(),
            "commands": self.commands.to_dict(),
            "sim": asdict(self.sim),
            "evaluation": self.evaluation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        if "schema_version" not in d:
            raise ConfigurationError("config lacks a schema_version field")
        try:
            sub = {
                "trainer": TrainerConfig.from_dict(d.pop("trainer", {})),
                "reward": RewardConfig.from_dict(d.pop("reward", {})),
                "randomization": RandomizationTable.from_dict(d.pop("randomization", {})),
                "commands": CommandRanges.from_dict(d.pop("commands", {})),
                "sim": SimParams(**d.pop("sim", {})),
                "evaluation": EvalConfig.from_dict(d.pop("evaluation", {})),
            }
        except TypeError as exc:
            raise ConfigurationError(f"bad config section: {exc}") from None
        return cls(**d, **sub)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text("utf-8"))

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def smoke_config(**overrides) -> RunConfig:
    """Small budget for quick end-to-end checks: 8 environments, 20 iterations."""
    cfg = RunConfig(name="smoke", trainer=TrainerConfig(n_envs=8, iterations=20, checkpoint_every=10))
    cfg.evaluation.episodes = 4
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg
