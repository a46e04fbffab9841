"""Experiment configuration, ablation variant wiring and JSON (de)serialisation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..data import DatasetConfig
from ..hashing import LOSS_NAMES, SUPPORTED_BITS, LossWeights
from ..pacl import PaclConfig


@dataclass(frozen=True)
class Wiring:
    taap: bool
    agsf: bool
    pacl: bool

    def __post_init__(self):
        if self.pacl and not self.taap:
            raise ValueError("prompt alignment losses need the prompt module")

    def active_losses(self) -> dict[str, bool]:
        """Which loss terms keep their weight; the rest are forced to zero."""
        return {name: self.pacl or name in ("gpa", "quan", "recon") for name in LOSS_NAMES}


# Row order follows the ablation table.
VARIANTS = {
    "baseline": Wiring(taap=False, agsf=False, pacl=False),
    "wo_pacl_agsf": Wiring(taap=True, agsf=False, pacl=False),
    "wo_taap_pacl": Wiring(taap=False, agsf=True, pacl=False),
    "wo_agsf": Wiring(taap=True, agsf=False, pacl=True),
    "wo_pacl": Wiring(taap=True, agsf=True, pacl=False),
    "full": Wiring(taap=True, agsf=True, pacl=True),
}


@dataclass
class ModelConfig:
    num_heads: int = 4
    mlp_ratio: int = 4
    ssm_state: int = 16
    taap_depth: int = 1
    per_feature_theta: bool = False
    train_token_embedding: bool = False
    # one hash function for both modalities instead of one per modality
    tie_hash_heads: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    bits: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    temperatures: PaclConfig = field(default_factory=PaclConfig)
    # backbone-side parameters (hash heads, trainable token table) vs prompt/fusion modules
    lr_backbone: float = 3e-3
    lr_modules: float = 1e-3
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {list(VARIANTS)}")
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    @property
    def wiring(self) -> Wiring:
        return VARIANTS[self.variant]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with ``seed`` driving both data generation and training."""
        return replace(self, seed=seed, dataset=replace(self.dataset, seed=seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["labels_per_sample"] = list(self.dataset.labels_per_sample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {
            "dataset": DatasetConfig,
            "model": ModelConfig,
            "weights": LossWeights,
            "temperatures": PaclConfig,
        }
        for key, typ in known.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def published_scale(config: ExperimentConfig | None = None) -> ExperimentConfig:
    """The published batch size and learning rates (backbone 1e-6, modules 1e-5)."""
    config = config or ExperimentConfig()
    return replace(config, batch_size=128, lr_backbone=1e-6, lr_modules=1e-5)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=2))
    return path
