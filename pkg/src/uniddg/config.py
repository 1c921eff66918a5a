"""Experiment configuration: one YAML file covering task, data, model and training.

Example::

    task: synthetic          # fundus | prostate | synthetic
    num_classes: 3
    centers: [C1, C2, C3]    # report column order; defaults to manifest order
    manifests: [data/manifest.jsonl]
    model:
      unet_widths: [16, 32, 64, 128, 256]
    train:
      batch_size: 8
      epochs: 500
      learning_rate: 1.0e-4
      weights: [5, 5, 10, 1, 5, 1, 1, 1, 1]
      enable_ema: true
      enable_sa: true

Relative manifest paths resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from uniddg.data import BDAConfig
from uniddg.losses import LossWeights
from uniddg.networks import ModelConfig

TASKS = ("fundus", "prostate", "synthetic")
SWAP_POLICIES = ("random-derangement", "backward-cyclic", "identity")
TASK_CLASSES = {"fundus": 3, "prostate": 2, "synthetic": 3}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 500
    max_steps: int | None = None
    learning_rate: float = 1e-4
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    ema_radius_frac: float = 0.04
    swap_policy: str = "random-derangement"
    enable_ema: bool = True
    enable_sa: bool = True
    enable_bda: bool = True
    bda: BDAConfig = field(default_factory=BDAConfig)
    grad_clip: float | None = 5.0
    seed: int = 0
    crop_size: int = 256
    resize_size: int = 256
    task: str = "fundus"
    checkpoint_every: int = 0

    def __post_init__(self):
        if not isinstance(self.weights, LossWeights):
            self.weights = (LossWeights(**self.weights) if isinstance(self.weights, dict)
                            else LossWeights.from_sequence(self.weights))
        if isinstance(self.bda, dict):
            self.bda = BDAConfig(**self.bda)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when set")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.swap_policy not in SWAP_POLICIES:
            raise ConfigError(f"swap_policy must be one of {SWAP_POLICIES}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if not self.ema_radius_frac > 0:
            raise ConfigError("ema_radius_frac must be positive")

    def to_dict(self):
        d = asdict(self)
        d["weights"] = list(self.weights.as_tuple())
        d["bda"]["scale_range"] = list(self.bda.scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ExperimentConfig:
    task: str = "synthetic"
    num_classes: int = 3
    centers: list | None = None
    manifests: list = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = "UniDDG"

    def to_dict(self):
        return {
            "task": self.task,
            "num_classes": self.num_classes,
            "centers": self.centers,
            "manifests": [str(m) for m in self.manifests],
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "method": self.method,
        }

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    task = raw.get("task", "synthetic")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    num_classes = int(raw.get("num_classes", TASK_CLASSES[task]))
    base_dir = base_dir or Path(".")
    manifests = [Path(m) if Path(m).is_absolute() else base_dir / m for m in raw.get("manifests", [])]
    model_raw = dict(raw.get("model") or {})
    model_raw.setdefault("num_classes", num_classes)
    if model_raw["num_classes"] != num_classes:
        raise ConfigError("model.num_classes disagrees with num_classes")
    train_raw = dict(raw.get("train") or {})
    train_raw.setdefault("task", task)
    try:
        model = ModelConfig.from_dict(model_raw)
        train = TrainConfig.from_dict(train_raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    extra = set(raw) - {"task", "num_classes", "centers", "manifests", "model", "train", "method"}
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    return ExperimentConfig(task, num_classes, raw.get("centers"), manifests, model, train,
                            raw.get("method", "UniDDG"))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw or {}, path.parent)


def dump_config(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
