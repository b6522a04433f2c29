"""Experiment configuration: TOML files with [data], [model], [loss], [train]
sections, plus ``section.key=value`` overrides applied after loading."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import ConfigurationError
from .losses import LossWeights
from .model import ModelConfig


@dataclass
class DataConfig:
    path: str = ""  # directory written by `cetn prepare`


@dataclass
class LossConfig:
    alpha: float = 0.2
    beta1: float = 0.3
    beta2: float = 0.2
    tau: float = 0.2
    contrastive: str = "do_infonce"  # or "infonce"
    # feed pre-through-connection value vectors to the auxiliary losses
    use_pre_through_values: bool = False

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta1, self.beta2, self.tau)


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 10000
    patience: int = 2
    max_epochs: int = 100
    seed: int = 2023
    lr_decay: float = 0.1
    min_lr: float = 1e-6
    monitor: str = "auc"  # or "logloss"
    sparse_embedding_updates: bool = True
    eval_batch_size: int = 20000


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "ExperimentConfig":
        try:
            self.loss.weights
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.loss.contrastive not in ("do_infonce", "infonce"):
            raise ConfigurationError(f"unknown contrastive loss {self.loss.contrastive!r}")
        if self.train.batch_size < 1 or self.train.max_epochs < 0 or self.train.patience < 1:
            raise ConfigurationError("batch_size and patience must be >= 1, max_epochs >= 0")
        if self.model.eval_perturbation not in ("off", "mean"):
            raise ConfigurationError(f"unknown eval_perturbation {self.model.eval_perturbation!r}")
        if self.train.monitor not in ("auc", "logloss"):
            raise ConfigurationError(f"unknown monitor metric {self.train.monitor!r}")
        try:
            self.model.variant
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        return self


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "loss": LossConfig, "train": TrainConfig}


def _coerce(cls, key: str, value: Any):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigurationError(f"unknown config key {cls.__name__}.{key}")
    default = getattr(cls(), key)
    if isinstance(value, list):
        return tuple(value)
    if isinstance(default, bool) or isinstance(value, bool):
        return bool(value)
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def from_dict(d: Dict[str, Dict[str, Any]]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section, values in d.items():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        for k, v in values.items():
            setattr(target, k, _coerce(_SECTIONS[section], k, v))
    return cfg


def parse_value(text: str):
    """Interpret an override value with TOML syntax, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        path, text = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigurationError(f"override key {path!r} must be section.key")
        section, key = parts
        setattr(getattr(cfg, section), key, _coerce(_SECTIONS[section], key, parse_value(text.strip())))
    return cfg


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    elif str(path).endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            cfg = from_dict(json.load(fh))
    else:
        with open(path, "rb") as fh:
            cfg = from_dict(tomllib.load(fh))
    return apply_overrides(cfg, overrides).validate()


def ablation_config(cfg: ExperimentConfig, ablations: Tuple[str, ...]) -> ExperimentConfig:
    out = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, ablations=tuple(ablations)))
    return out.validate()
