"""Experiment configuration (YAML) and run manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .defense import LAMBDA_GRID
from .fabrication import VARIANTS, FabricationConfig
from .games import MixtureSpec
from .geometry import FDConfig
from .mia import StatisticKind
from .model_core import TrainConfig

__version__ = "0.1.0"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"source": "synthetic", "n": 4000, "seed": 0})
    arch: str = "cnn"
    arch_kwargs: dict = field(default_factory=dict)
    n_train: int = 1000
    n_shadow: int = 16
    n_eval: int | None = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=120))
    fabrication: FabricationConfig = field(default_factory=FabricationConfig)
    variants: list[str] = field(default_factory=lambda: ["mfa"])
    epsilons: list[float] = field(default_factory=lambda: [4 / 255])
    statistics: list[str] = field(default_factory=lambda: ["loss", "attack_r", "lira"])
    lambda_grid: list[float] = field(default_factory=lambda: list(LAMBDA_GRID))
    calibration_kind: str = "attack_r"
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    fd: FDConfig = field(default_factory=FDConfig)
    prefilter_negatives: str = "fabricated"
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        self.train.validate()
        self.fabrication.validate()
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        for s in self.statistics:
            StatisticKind(s)
        StatisticKind(self.calibration_kind)
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("epsilons must be nonnegative")
        if any(not l > 0 for l in self.lambda_grid):
            raise ConfigError("lambda grid values must be positive")
        if self.prefilter_negatives not in ("fabricated", "natural"):
            raise ConfigError("prefilter_negatives must be 'fabricated' or 'natural'")
        if self.n_train < 1 or self.n_shadow < 0:
            raise ConfigError("n_train must be >= 1 and n_shadow >= 0")
        if self.dataset.get("source") == "path" and not Path(self.dataset["path"]).exists():
            raise ConfigError(f"dataset path {self.dataset['path']!r} does not exist")
        needs_refs = {"attack_r", "lira", "rmia"} & (set(self.statistics) | {self.calibration_kind})
        if needs_refs and self.n_shadow < 1:
            raise ConfigError(f"statistics {sorted(needs_refs)} need n_shadow >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def section_hash(self, *keys: str) -> str:
        d = self.to_dict()
        return stable_hash({k: d[k] for k in keys})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "train" in d:
                d["train"] = TrainConfig(**d["train"])
            if "fabrication" in d:
                d["fabrication"] = FabricationConfig(**d["fabrication"])
            if "mixture" in d:
                d["mixture"] = MixtureSpec(**d["mixture"])
            if "fd" in d:
                d["fd"] = FDConfig(**d["fd"])
            return cls(**d).validate()
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return ExperimentConfig.from_dict(yaml.safe_load(path.read_text()))


def stable_hash(obj) -> str:
    """Hash of a JSON-able object, independent of dict key order."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    seeds: dict
    artifacts: list[str]
    metrics: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    version: str = __version__

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
