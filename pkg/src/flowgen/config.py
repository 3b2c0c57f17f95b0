"""One declarative run configuration covering every pipeline stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, fields

from .blobio import atomic_write_text
from .trainer import TrainConfig, M2_FROZEN


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # urban KG construction
    nearby_km: float = 2.0
    similar_top_k: int = 10
    competitive_km: float = 1.0
    checkin_window_hours: float = 24.0
    # KG embeddings
    d_kg: int = 32
    kge_epochs: int = 200
    kge_batch_size: int = 128
    kge_lr: float = 1e-3
    kge_label_smoothing: float = 0.1
    kge_dropout: float = 0.2
    # diffusion process
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    clip_x0: float | None = 6.0
    # denoising network
    d_h: int = 64
    num_layers: int = 5
    heads: int = 4
    step_mlp_dim: int = 512
    vol_hidden: int = 64
    use_guide: bool = True
    use_spatial_fusion: bool = True
    kg_in_condition: bool = False
    degree_normalize: bool = False
    temporal_positional: bool = True
    # training
    epochs: int = 200
    m1: int = 100
    m2: int | str = 10
    lr: float = 1e-3
    pretrain_lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    threads: int = 0
    # generation / evaluation
    num_samples: int = 0  # 0 means "as many as real test days"
    # prediction mode
    t_in: int = 12
    t_out: int = 12
    predict_epochs: int = 300
    predict_samples: int = 8
    # synthetic data
    synth_regions: int = 8
    synth_days: int = 40
    synth_pois: int = 30
    synth_noise: float = 0.05
    synth_coupling: float = 0.2

    def validate(self) -> None:
        if self.nearby_km <= 0 or self.competitive_km <= 0:
            raise ConfigError("distance thresholds must be positive")
        if self.similar_top_k < 1:
            raise ConfigError("similar_top_k must be >= 1")
        if self.d_kg < 1 or self.d_h < 1 or self.num_layers < 1 or self.heads < 1:
            raise ConfigError("model dimensions must be >= 1")
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.m1 < 0 or self.epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.m2 != M2_FROZEN and (not isinstance(self.m2, int) or self.m2 < 1):
            raise ConfigError(f"m2 must be a positive int or {M2_FROZEN!r}")
        for name in ("kge_lr", "lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.t_in < 1 or self.t_out < 1:
            raise ConfigError("t_in and t_out must be >= 1")
        if self.num_samples < 0:
            raise ConfigError("num_samples must be >= 0")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        config = cls(**raw)
        config.validate()
        return config

    def to_file(self, path) -> None:
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True))

    def train_config(self, **overrides) -> TrainConfig:
        keys = ("epochs", "m1", "m2", "lr", "pretrain_lr", "batch_size", "seed", "d_h",
                "num_layers", "heads", "step_mlp_dim", "vol_hidden", "use_guide",
                "use_spatial_fusion", "kg_in_condition", "degree_normalize",
                "temporal_positional", "clip_x0", "threads")
        kwargs = {k: getattr(self, k) for k in keys}
        kwargs.update(overrides)
        return TrainConfig(**kwargs)
