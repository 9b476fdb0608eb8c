"""Run configuration: YAML file with sections
{data, model, losses, curation, schedule, seed}.

Hyperparameter keys use their conventional short names
(m_e, m_p, d_p, Q, tau, alpha, sigma, beta, gamma, delta_w, delta_t, T1..T4).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .curation import CurationConfig
from .datagen import DatasetSpec
from .losses import LossConfig
from .model import ModelConfig


@dataclass
class ScheduleConfig:
    T1: int = 10
    T2: int = 5
    T3: int = 10
    T4: int = 40
    warmup_epochs: int = 2
    lr: float = 0.05
    batch_size: int = 64
    opt_momentum: float = 0.9
    weight_decay: float = 1e-4
    strength_weak: float = 0.02
    strength_strong: float = 0.1
    polish_in_stage2: bool = False
    zero_shot_per_class: int = 16

    @property
    def total_epochs(self) -> int:
        return self.T1 + self.T2 + self.T3 + self.T4

    def stage_of(self, epoch: int) -> int:
        if epoch < self.T1:
            return 1
        if epoch < self.T1 + self.T2:
            return 2
        if epoch < self.T1 + self.T2 + self.T3:
            return 3
        return 4

    def validate(self) -> None:
        for name in ("T1", "T2", "T3", "T4", "warmup_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.strength_weak < 0 or self.strength_strong < 0:
            raise ValueError("perturbation strengths must be non-negative")


@dataclass
class TrainConfig:
    data: DatasetSpec
    model: ModelConfig
    losses: LossConfig
    curation: CurationConfig
    schedule: ScheduleConfig
    seed: int = 0
    proto_momentum: float = 0.999  # m_p
    proto_alpha: float = 10.0      # concentration smoother

    def validate(self) -> None:
        self.data.validate()
        self.losses.validate()
        self.curation.validate()
        self.schedule.validate()
        if not (0.0 <= self.proto_momentum < 1.0):
            raise ValueError("m_p must be in [0, 1)")


_MODEL_KEYS = {"d_e": "feature_dim", "d_p": "proj_dim", "hidden": "hidden_dim",
               "m_e": "encoder_momentum", "Q": "bank_capacity",
               "dtype": "dtype"}


def load_config(path: str | Path, seed: int | None = None) -> TrainConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return config_from_dict(raw, seed=seed)


def config_from_dict(raw: dict, seed: int | None = None) -> TrainConfig:
    top_seed = seed if seed is not None else int(raw.get("seed", 0))

    data_raw = dict(raw.get("data", {}))
    data_raw.setdefault("seed", top_seed)
    spec = DatasetSpec(**data_raw)

    model_raw = dict(raw.get("model", {}))
    m_p = float(model_raw.pop("m_p", 0.999))
    alpha = float(model_raw.pop("alpha", 10.0))
    model_kwargs = {_MODEL_KEYS[k]: v for k, v in model_raw.items()}
    model = ModelConfig(input_dim=spec.input_dim,
                        num_classes=spec.num_classes, **model_kwargs)

    losses = LossConfig(**raw.get("losses", {}))
    curation = CurationConfig(**raw.get("curation", {}))
    schedule = ScheduleConfig(**raw.get("schedule", {}))

    cfg = TrainConfig(data=spec, model=model, losses=losses,
                      curation=curation, schedule=schedule, seed=top_seed,
                      proto_momentum=m_p, proto_alpha=alpha)
    cfg.validate()
    return cfg
