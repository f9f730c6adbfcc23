"""YAML run configuration with documented defaults for every field.

A minimal file only needs ``protocol`` and ``shots``::

    protocol: multi
    shots: 1

Full layout (all keys optional)::

    protocol: single | multi
    shots: 1 | 2 | 5
    fold: 0
    seed: 0
    baselines: [ft, imprint]
    data_dir: data
    out_dir: runs
    data:
      base_classes: [1, 2, 3, 4, 5]
      novel_class_groups: [[6, 7], [8, 9]]
      image_size: 32
      images_per_class: 40
      test_images_per_class: 20
      shot_counts: [1, 2, 5]
    semantic:
      source: random          # or: file
      path: null
    train:                    # any TrainConfig field
      epochs_base: 30
      ...
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import SplitPlan
from .engine import TrainConfig
from .errors import ConfigError, IoError

PROTOCOLS = ("single", "multi")
SHOT_CHOICES = (1, 2, 5)
BASELINES = ("ft", "imprint")


@dataclass
class DataConfig:
    base_classes: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    novel_class_groups: list[list[int]] = field(default_factory=lambda: [[6, 7], [8, 9]])
    image_size: int = 32
    images_per_class: int = 40
    test_images_per_class: int = 20
    shot_counts: list[int] = field(default_factory=lambda: [1, 2, 5])

    def __post_init__(self):
        if self.images_per_class < 1 or self.test_images_per_class < 1:
            raise ConfigError("image counts must be >= 1")
        if not self.shot_counts or any(k < 1 for k in self.shot_counts):
            raise ConfigError("shot_counts must hold positive integers")


@dataclass
class SemanticConfig:
    source: str = "random"
    path: str | None = None

    def __post_init__(self):
        if self.source not in ("random", "file"):
            raise ConfigError(f"semantic source must be 'random' or 'file', not {self.source!r}")
        if self.source == "file" and not self.path:
            raise ConfigError("semantic source 'file' needs a path")


@dataclass
class RunConfig:
    protocol: str = "multi"
    shots: int = 1
    fold: int = 0
    seed: int = 0
    baselines: list[str] = field(default_factory=list)
    data_dir: str = "data"
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.shots not in SHOT_CHOICES:
            raise ConfigError(f"shots must be one of {SHOT_CHOICES}, got {self.shots!r}")
        if self.fold < 0:
            raise ConfigError("fold must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        bad = [b for b in self.baselines if b not in BASELINES]
        if bad:
            raise ConfigError(f"unknown baselines {bad}; choose from {BASELINES}")
        # one seed drives data and training unless train.seed was set explicitly
        self.train = dataclasses.replace(self.train, seed=self.train.seed or self.seed)

    def plan(self, fold: int | None = None) -> SplitPlan:
        fold = self.fold if fold is None else fold
        return SplitPlan(self.data.base_classes, self.data.novel_class_groups, self.shots,
                         data_seed(self.seed, fold), self.data.image_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def data_seed(seed: int, fold: int) -> int:
    """Folds differ by their data draw; fold 0 uses the run seed unchanged."""
    if fold == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1, dtype=np.uint64)[0])


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    sub = {"data": DataConfig, "semantic": SemanticConfig, "train": TrainConfig}
    parts = {k: _build(cls, raw.pop(k, None), k) for k, cls in sub.items()}
    if "baseline" in raw:
        b = raw.pop("baseline")
        raw["baselines"] = [] if b is None else [b] if isinstance(b, str) else list(b)
    top = {f.name for f in dataclasses.fields(RunConfig)} - set(sub)
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    try:
        return RunConfig(**raw, **parts)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if isinstance(raw, dict) and "manifest_version" in raw:
        # a run manifest embeds the full config it was produced with
        raw = raw.get("config")
    return from_dict(raw)


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Apply CLI overrides (``None`` values are ignored) and re-validate."""
    raw = cfg.to_dict()
    for key, value in changes.items():
        if value is None:
            continue
        if key == "seed":
            raw["train"]["seed"] = 0
        raw[key] = value
    return from_dict(raw)
