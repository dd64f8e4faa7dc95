"""Run configuration shared by the command-line tools.

A run config is a JSON or YAML mapping with the sections below. Unknown
keys are rejected at every level, and the fully resolved config (defaults
filled in) is hashed so outputs can record exactly what produced them.

.. code-block:: yaml

    seed: 0
    strict: true
    threads: 1
    model: {S: 16, D: 64, heads: 4, N: 6, E: 2, ffn_mult: 4, head_init: zero,
            encoder: {kind: image, image_size: 224, patch_size: 32, depth: 2}}
    partition: {t_min: 50, t_max: [25000, 10000, 5000, 2000, 1000, 750, 500]}
    optim: {lr: 0.01, momentum: 0.9, weight_decay: 0.0001,
            milestones: [4, 8, 12, 13, 14, 15], gamma: 0.5}
    train: {epochs: 40, batch_size: 512, augment: false}
    paths: {metadata: data/meta.jsonl, inputs: data/inputs.npz,
            partition: out/partition.json, out_dir: out}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geocell import DEFAULT_T_MAX, DEFAULT_T_MIN
from .model import ConfigError, EncoderConfig
from .numerics.optim import DEFAULT_MILESTONES


@dataclass
class ModelSection:
    S: int = 16
    D: int = 64
    heads: int = 4
    N: int = 6
    E: int = 2
    ffn_mult: int = 4
    values_equal_keys: bool = False
    head_init: str = "zero"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)


@dataclass
class PartitionSection:
    t_min: int = DEFAULT_T_MIN
    t_max: list[int] = field(default_factory=lambda: list(DEFAULT_T_MAX))


@dataclass
class OptimSection:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: list[int] = field(default_factory=lambda: list(DEFAULT_MILESTONES))
    gamma: float = 0.5


@dataclass
class TrainSection:
    epochs: int = 40
    batch_size: int = 512
    augment: bool = False


@dataclass
class PathsSection:
    metadata: str | None = None
    inputs: str | None = None
    partition: str | None = None
    out_dir: str = "out"


@dataclass
class RunConfig:
    seed: int = 0
    strict: bool = False
    threads: int = 1
    model: ModelSection = field(default_factory=ModelSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.optim.lr <= 0:
            raise ConfigError("learning rate must be positive")
        t = self.partition.t_max
        if not t or any(b >= a for a, b in zip(t, t[1:])):
            raise ConfigError(f"partition t_max must be a nonempty strictly decreasing list, got {t}")
        if self.partition.t_min < 1 or self.partition.t_min >= t[-1]:
            raise ConfigError(f"partition t_min {self.partition.t_min} must lie in [1, {t[-1]})")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d or {}, "config")
        cfg.validate()
        return cfg


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON/YAML run config and apply top-level ``overrides`` (None values are ignored)."""
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text) if Path(path).suffix.lower() in (".yaml", ".yml") else json.loads(text)
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot parse config ({exc})") from None
        doc = doc or {}
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    return RunConfig.from_dict(doc)
