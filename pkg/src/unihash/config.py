"""Run configuration: nested dataclasses loaded from JSON, every key defaulted.

Precedence is built-in defaults < config file < command-line flags. Unknown
keys anywhere in the document are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .network import ModelConfig
from .objectives import LossWeights
from .training import CenterConfig, TrainConfig


@dataclass
class DataSection:
    path: str | None = None  # feature file; None generates synthetic data
    classes: int = 8
    dim: int = 32
    per_class: int = 250
    spread: float = 0.3
    seed: int = 1
    seen_ratio: float = 0.8
    split_seed: int = 0
    query_frac: float = 0.2
    val_frac: float = 0.1
    train_frac: float = 1.0


@dataclass
class ModelSection:
    input_dim: int | None = None  # None: taken from the data
    feature_dim: int = 64
    code_len: int = 16
    num_experts: int = 8
    top_k: int = 2
    backbone_layers: int = 1
    gate_mode: str = "sigmoid_norm"
    shared_experts: bool = True
    tanh_output: bool = True


@dataclass
class CenterSection:
    method: str = "auto"
    d_floor: int | None = None


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 64
    lambda1: float = 4.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    detach_schedule: str = "per_epoch"
    seed: int = 0
    lr: float = 1e-4
    alpha: float = 0.99
    eps: float = 1e-8
    include_diagonal: bool = True


@dataclass
class EvalSection:
    K: int = 100
    protocols: list | None = None  # None: all four
    pr_curve: bool = True


@dataclass
class SweepSection:
    lambda1: list = field(default_factory=lambda: [4.0])
    lambda2: list = field(default_factory=lambda: [1.0])
    lambda3: list = field(default_factory=lambda: [1.0])
    num_experts: list = field(default_factory=list)
    top_k: list = field(default_factory=list)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    centers: CenterSection = field(default_factory=CenterSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def model_config(self, input_dim: int) -> ModelConfig:
        m = dataclasses.asdict(self.model)
        if m["input_dim"] is None:
            m["input_dim"] = input_dim
        elif m["input_dim"] != input_dim:
            raise ConfigError(f"model.input_dim={m['input_dim']} but data has {input_dim} features")
        return ModelConfig(**m)

    def train_config(self, input_dim: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size,
            weights=LossWeights(t.lambda1, t.lambda2, t.lambda3),
            detach_schedule=t.detach_schedule, seed=t.seed,
            model=self.model_config(input_dim),
            centers=CenterConfig(self.centers.method, self.centers.d_floor),
            lr=t.lr, alpha=t.alpha, eps=t.eps, include_diagonal=t.include_diagonal)


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{where}{k}' for k in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, doc, "")


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
