"""Pipeline configuration: one seeded, JSON-serialisable record.

Values are layered defaults < config file < command-line flags. All
randomness derives from ``seed`` through named sub-seeds so that changing one
component (say, batching) leaves the others untouched.
"""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .oracle import ALL_SEPARABLE, PROFILES
from .search import SearchConfig
from .surrogate import TrainConfig


@dataclass(frozen=True)
class SynthConfig:
    n_clips: int = 10
    n_prompts: int = 10
    n_advances: int = 2
    dim: int = 64
    profile: str = ALL_SEPARABLE
    noise_scale: float = 0.0
    min_margin: float = 0.1

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise InvalidInputError(f"unknown separability profile {self.profile!r}")


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 1024


@dataclass(frozen=True)
class Paths:
    embeddings: Optional[str] = None
    tensor: Optional[str] = None
    model: Optional[str] = None
    assignments: Optional[str] = None
    sets: Optional[str] = None
    out: str = "out"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    paths: Paths = field(default_factory=Paths)
    verify: bool = True
    averaging: str = "macro"

    def sub_seed(self, name: str) -> int:
        """Independent 63-bit seed for a named component."""
        ss = np.random.SeedSequence([int(self.seed) & (2**64 - 1), zlib.crc32(name.encode())])
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["train"]["milestones"] = list(self.train.milestones)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return merge(cls(), data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InvalidInputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidInputError(f"config file {path} must hold a JSON object")
        return cls.from_dict(data)


def merge(cfg, overrides: dict):
    """Return ``cfg`` with ``overrides`` applied; nested dataclass fields take
    nested dicts, and dotted keys ("search.alpha") are accepted too."""
    nested: dict = {}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        elif isinstance(value, dict):
            nested.setdefault(head, {}).update(value)
        else:
            nested[head] = value
    names = {f.name: f for f in dataclasses.fields(cfg)}
    changes = {}
    for key, value in nested.items():
        if key not in names:
            raise InvalidInputError(f"unknown config field {key!r} in {type(cfg).__name__}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise InvalidInputError(f"config field {key!r} must be an object")
            changes[key] = merge(current, value)
        else:
            if key == "milestones":
                value = tuple(value)
            changes[key] = value
    try:
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"invalid configuration: {exc}") from None
