"""Run configuration loaded from a TOML file.

Example::

    seed = 0
    out = "runs/default"

    [model]
    d_model = 64

    [suite]
    languages = 3
    train = 2000

    [finetune]
    mode = "mnaft"
    target_task = 0
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .maskedft import FinetuneConfig
from .model import ModelConfig


@dataclass
class SuiteConfig:
    languages: int = 3
    pairs: list[list[int]] | None = None  # default cycle L0->L1, L1->L2, L2->L0
    train: int = 2000
    score: int = 128
    eval: int = 256


@dataclass
class BaseTrainConfig:
    steps: int = 800
    lr: float = 3e-3
    batch_size: int = 32
    optimizer: str = "adam"
    precision: str = "float32"
    warmup: int = 100
    decay: str = "cosine"


@dataclass
class ScoringConfig:
    kind: str = "translate"  # translate | ocr-probe | both
    k_vision: int = 1
    k_llm: int = 1
    batch_size: int = 32


@dataclass
class PartitionConfig:
    epsilon: float = 0.5
    rho: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    base: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def validate(self) -> None:
        self.model.validate()
        self.finetune.validate()
        if self.suite.languages < 2:
            raise ValueError("suite needs at least 2 languages")
        if min(self.suite.train, self.suite.score, self.suite.eval) < 1:
            raise ValueError("split sizes must be >= 1")
        if self.scoring.kind not in ("translate", "ocr-probe", "both"):
            raise ValueError(f"unknown scoring kind {self.scoring.kind!r}")
        if self.scoring.k_vision < 1 or self.scoring.k_llm < 1:
            raise ValueError("k_vision and k_llm must be >= 1")
        if not (0 <= self.partition.epsilon <= 1 and 0 <= self.partition.rho <= 1):
            raise ValueError("epsilon and rho must lie in [0, 1]")
        if self.base.steps < 1:
            raise ValueError("base.steps must be >= 1")
        if not 0 <= self.base.warmup < self.base.steps:
            raise ValueError(f"base.warmup={self.base.warmup} must lie in [0, base.steps={self.base.steps})")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, *sections: str) -> str:
        """Hash of the named sections (whole config when none given), excluding ``out``."""
        d = self.to_dict()
        d.pop("out")
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"model": ModelConfig, "suite": SuiteConfig, "base": BaseTrainConfig,
             "scoring": ScoringConfig, "partition": PartitionConfig, "finetune": FinetuneConfig}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    return cls(**values)


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data.pop(name), name)
    for key in ("seed", "out"):
        if key in data:
            kwargs[key] = data.pop(key)
    if data:
        raise ValueError(f"unknown top-level key(s): {sorted(data)}")
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        return from_dict(tomli.load(fh))


def with_overrides(cfg: RunConfig, seed: int | None = None, out: str | None = None) -> RunConfig:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=out)
    return cfg
