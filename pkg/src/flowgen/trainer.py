"""Training orchestration: volume-estimator pretraining, alternating updates,
the masked-window prediction variant, generation and checkpointing.

The schedule is: M1 epochs of volume pretraining on the squared-error loss,
then repeating blocks of M2 diffusion epochs (the L1 noise loss updates the
denoiser, the condition module and the volume estimator jointly) followed by
one volume-only update. The sentinel m2="w/o" freezes the estimator after
pretraining. Seeded runs are bitwise reproducible single-threaded.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import blobio
from .data import Dataset
from .denoiser import (DenoiserNet, FeatureCondition, VolumeEstimator,
                       WindowCondition, dense_adjacency, expand_volume)
from .diffusion import (NoiseSchedule, diffusion_loss, forward_marginal,
                        make_linear_schedule, sample, true_volume, volume_loss)
from .kge import KGEmbeddingSet, region_embedding_matrix
from .ukg import RegionSubgraph

M2_FROZEN = "w/o"


class TrainerError(RuntimeError):
    pass


class TrainingDivergedError(TrainerError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    m1: int = 100
    m2: int | str = 10
    lr: float = 1e-3
    pretrain_lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0
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
    clip_x0: float | None = 6.0
    threads: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.m1 < 0:
            raise TrainerError("epochs and m1 must be >= 0")
        if self.m2 != M2_FROZEN and (not isinstance(self.m2, int) or self.m2 < 1):
            raise TrainerError(f"m2 must be a positive int or {M2_FROZEN!r}")
        if self.lr <= 0:
            raise TrainerError("lr must be positive")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")


@dataclass
class TrainLogEntry:
    epoch: int
    phase: str  # pretrain | diffusion | volume
    loss: float
    seconds: float


def write_train_log(path, entries: list[TrainLogEntry]) -> None:
    lines = ["epoch,phase,loss,seconds\n"]
    lines += [f"{e.epoch},{e.phase},{e.loss:.8g},{e.seconds:.4f}\n" for e in entries]
    blobio.atomic_write_text(path, "".join(lines))


def _as_embedding_matrix(kg_embeddings, region_ids) -> np.ndarray:
    if isinstance(kg_embeddings, KGEmbeddingSet):
        return region_embedding_matrix(kg_embeddings, region_ids)
    matrix = np.asarray(kg_embeddings, dtype=np.float32)
    if matrix.shape[0] != len(region_ids):
        raise TrainerError(f"embedding matrix has {matrix.shape[0]} rows for "
                           f"{len(region_ids)} regions")
    return matrix


def _build_modules(manifest: dict):
    denoiser = DenoiserNet(
        channels=manifest["channels"],
        d_kg=manifest["d_kg"],
        num_steps=manifest["num_steps"],
        d_h=manifest["d_h"],
        num_layers=manifest["num_layers"],
        heads=manifest["heads"],
        step_mlp_dim=manifest["step_mlp_dim"],
        degree_normalize=manifest["degree_normalize"],
        spatial_fusion=manifest["use_spatial_fusion"],
        positional=manifest.get("temporal_positional", True),
    )
    estimator = None
    if manifest["use_guide"]:
        estimator = VolumeEstimator(manifest["d_fea"], manifest["channels"],
                                    manifest["vol_hidden"])
    if manifest["mode"] == "prediction":
        condition = WindowCondition(manifest["channels"], manifest["d_h"])
    else:
        condition = FeatureCondition(
            manifest["d_fea"], manifest["channels"], manifest["d_h"],
            use_volume=manifest["use_guide"],
            kg_dim=manifest["d_kg"] if manifest["kg_in_condition"] else 0)
    return denoiser, estimator, condition


class TrainedModel:
    """Denoiser + estimator + condition module plus everything needed to
    rebuild them: a manifest of dimensions, flags and normalization stats."""

    def __init__(self, denoiser, estimator, condition, schedule: NoiseSchedule,
                 manifest: dict):
        self.denoiser = denoiser
        self.estimator = estimator
        self.condition = condition
        self.schedule = schedule
        self.manifest = manifest

    def modules(self) -> dict:
        out = {"denoiser": self.denoiser, "condition": self.condition}
        if self.estimator is not None:
            out["estimator"] = self.estimator
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for mod_name, module in self.modules().items():
            for key, tensor in module.state_dict().items():
                arrays[f"{mod_name}.{key}"] = tensor.detach().numpy().copy()
        return arrays

    def save(self, path) -> None:
        blobio.save_blobs(path, self.manifest, self.state_arrays())

    @classmethod
    def load(cls, path) -> "TrainedModel":
        manifest, arrays = blobio.load_blobs(path)
        denoiser, estimator, condition = _build_modules(manifest)
        schedule = make_linear_schedule(manifest["num_steps"],
                                        manifest["beta_start"], manifest["beta_end"])
        model = cls(denoiser, estimator, condition, schedule, manifest)
        for mod_name, module in model.modules().items():
            prefix = mod_name + "."
            state = {k[len(prefix):]: torch.as_tensor(v)
                     for k, v in arrays.items() if k.startswith(prefix)}
            module.load_state_dict(state)
            module.eval()
        return model


def pretrain_volume(estimator: VolumeEstimator, conditions: torch.Tensor,
                    flow_samples: torch.Tensor, m1: int, lr: float
                    ) -> list[TrainLogEntry]:
    """M1 epochs of squared-error descent toward the mean per-day volume."""
    if flow_samples.numel() == 0:
        raise TrainerError("pretraining requires at least one flow sample")
    horizon = flow_samples.shape[-2]
    target = true_volume(flow_samples).mean(dim=0)  # (L, T, C), flat over T
    opt = torch.optim.Adam(estimator.parameters(), lr=lr)
    log = []
    for epoch in range(1, m1 + 1):
        t0 = time.perf_counter()
        pred = expand_volume(estimator(conditions), horizon)
        loss = volume_loss(pred, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append(TrainLogEntry(epoch, "pretrain", float(loss.detach()),
                                 time.perf_counter() - t0))
    return log


class Trainer:
    """Drives the alternating schedule over one dataset's train regions."""

    def __init__(self, dataset: Dataset, kg_embeddings, subgraph: RegionSubgraph,
                 schedule: NoiseSchedule, config: TrainConfig):
        config.validate()
        if list(subgraph.region_ids) != list(dataset.train_ids):
            raise TrainerError("subgraph region order must match dataset.train_ids")
        if dataset.flow.shape[0] == 0:
            raise TrainerError("dataset has no usable training days")
        if config.threads:
            torch.set_num_threads(config.threads)
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.config = config
        self.schedule = schedule

        self.x_days = torch.as_tensor(dataset.normalized_flow(dataset.train_ids))
        self.cond_feats = torch.as_tensor(
            dataset.conditions_for(dataset.train_ids), dtype=torch.float32)
        matrix = _as_embedding_matrix(kg_embeddings, dataset.train_ids)
        self.e_kg = torch.as_tensor(matrix, dtype=torch.float32)
        self.adjacency = dense_adjacency(subgraph)
        self.vol_target = self.x_days.mean(dim=(0, 2))  # (L, C)
        self.horizon = self.x_days.shape[-2]

        self.manifest = {
            "format": "flowgen-checkpoint",
            "mode": "generation",
            "channels": dataset.channels,
            "d_fea": dataset.conditions.shape[1],
            "d_kg": matrix.shape[1],
            "horizon": dataset.horizon,
            "num_steps": schedule.num_steps,
            "beta_start": float(schedule.betas[0]),
            "beta_end": float(schedule.betas[-1]),
            "flow_mean": dataset.flow_mean.tolist(),
            "flow_std": dataset.flow_std.tolist(),
            "clip_x0": config.clip_x0,
            **{k: getattr(config, k) for k in
               ("d_h", "num_layers", "heads", "step_mlp_dim", "vol_hidden",
                "use_guide", "use_spatial_fusion", "kg_in_condition",
                "degree_normalize", "temporal_positional")},
        }
        self.denoiser, self.estimator, self.condition = _build_modules(self.manifest)

        self.frozen_estimator = config.m2 == M2_FROZEN
        joint = list(self.denoiser.parameters()) + list(self.condition.parameters())
        if self.estimator is not None and not self.frozen_estimator:
            joint += list(self.estimator.parameters())
        self.opt_joint = torch.optim.Adam(joint, lr=config.lr)
        self.opt_vol = None
        if self.estimator is not None and not self.frozen_estimator:
            self.opt_vol = torch.optim.Adam(self.estimator.parameters(), lr=config.lr)
        self.log: list[TrainLogEntry] = []
        self.epoch = 0
        self._last_state: dict | None = None

    def _guide_and_cond(self):
        if self.estimator is not None:
            vol = self.estimator(self.cond_feats)                       # (L, C)
            guide = expand_volume(vol, self.horizon)                    # (L, T, C)
        else:
            vol = None
            guide = torch.zeros(self.e_kg.shape[0], self.horizon,
                                self.manifest["channels"])
        e_kg_cond = self.e_kg if self.manifest["kg_in_condition"] else None
        cond = self.condition(self.cond_feats, vol, e_kg_cond)
        return guide, cond

    def pretrain(self) -> None:
        if self.estimator is None or self.config.m1 == 0:
            return
        entries = pretrain_volume(self.estimator, self.cond_feats, self.x_days,
                                  self.config.m1, self.config.pretrain_lr)
        self.log.extend(entries)

    def diffusion_epoch(self) -> float:
        num_days = self.x_days.shape[0]
        order = self.rng.permutation(num_days)
        total = 0.0
        t0 = time.perf_counter()
        for start in range(0, num_days, self.config.batch_size):
            idx = order[start:start + self.config.batch_size]
            x0 = self.x_days[torch.as_tensor(idx)]
            guide, cond = self._guide_and_cond()
            steps = self.rng.integers(1, self.schedule.num_steps + 1, size=len(idx))
            noise = torch.randn(x0.shape)
            x_n = forward_marginal(x0, guide, steps, self.schedule, noise)
            eps_hat = self.denoiser(x_n, torch.as_tensor(steps), self.e_kg,
                                    cond, self.adjacency)
            loss = diffusion_loss(eps_hat, noise)
            self.opt_joint.zero_grad()
            loss.backward()
            self.opt_joint.step()
            total += float(loss.detach()) * len(idx)
        self.epoch += 1
        mean_loss = total / num_days
        self.log.append(TrainLogEntry(self.epoch, "diffusion", mean_loss,
                                      time.perf_counter() - t0))
        return mean_loss

    def volume_update(self) -> float:
        t0 = time.perf_counter()
        pred = expand_volume(self.estimator(self.cond_feats), self.horizon)
        target = expand_volume(self.vol_target, self.horizon)
        loss = volume_loss(pred, target)
        self.opt_vol.zero_grad()
        loss.backward()
        self.opt_vol.step()
        self.log.append(TrainLogEntry(self.epoch, "volume", float(loss.detach()),
                                      time.perf_counter() - t0))
        return float(loss.detach())

    def model(self) -> TrainedModel:
        return TrainedModel(self.denoiser, self.estimator, self.condition,
                            self.schedule, dict(self.manifest))

    def run(self, run_dir=None) -> tuple[TrainedModel, list[TrainLogEntry]]:
        self.pretrain()
        if self.estimator is not None and self.frozen_estimator:
            self.estimator.requires_grad_(False)
        self._last_state = self.model().state_arrays()
        alternating = self.opt_vol is not None
        m2 = self.config.m2 if alternating else self.config.epochs
        while self.epoch < self.config.epochs:
            block = min(m2, self.config.epochs - self.epoch) if alternating \
                else self.config.epochs - self.epoch
            for _ in range(block):
                loss = self.diffusion_epoch()
                if not math.isfinite(loss):
                    self._abort(run_dir)
                self._last_state = self.model().state_arrays()
            if alternating and block == m2:
                vol_loss = self.volume_update()
                if not math.isfinite(vol_loss):
                    self._abort(run_dir)
        model = self.model()
        for module in model.modules().values():
            module.eval()
        return model, self.log

    def _abort(self, run_dir) -> None:
        if run_dir is not None:
            import os
            path = os.path.join(run_dir, "checkpoint.bin")
            blobio.save_blobs(path, self.manifest, self._last_state)
        raise TrainingDivergedError(
            f"non-finite loss at epoch {self.epoch}; last finite state "
            + ("saved" if run_dir else "discarded"))


def train(dataset: Dataset, kg_embeddings, subgraph: RegionSubgraph,
          schedule: NoiseSchedule, config: TrainConfig, run_dir=None
          ) -> tuple[TrainedModel, list[TrainLogEntry]]:
    return Trainer(dataset, kg_embeddings, subgraph, schedule, config).run(run_dir)


def generate_for_regions(model: TrainedModel, test_conditions: np.ndarray,
                         test_kg_embeddings, test_subgraph: RegionSubgraph,
                         num_samples: int, seed: int = 0) -> np.ndarray:
    """Sample flow for held-out regions; returns raw-space (S, L, T, C).

    The guide comes from the trained volume estimator applied to the test
    conditions; output is de-normalized with the checkpoint's train-region
    stats and clamped at zero.
    """
    manifest = model.manifest
    conditions = np.asarray(test_conditions, dtype=np.float32)
    if conditions.ndim != 2 or conditions.shape[1] != manifest["d_fea"]:
        raise TrainerError(
            f"feature dim {conditions.shape} does not match checkpoint "
            f"d_fea={manifest['d_fea']}")
    matrix = _as_embedding_matrix(test_kg_embeddings, list(test_subgraph.region_ids))
    if conditions.shape[0] != matrix.shape[0]:
        raise TrainerError("conditions and embeddings disagree on region count")
    cond_feats = torch.as_tensor(conditions)
    e_kg = torch.as_tensor(matrix, dtype=torch.float32)
    adjacency = dense_adjacency(test_subgraph)
    horizon = manifest["horizon"]

    model.denoiser.eval()
    with torch.no_grad():
        if model.estimator is not None:
            model.estimator.eval()
            vol = model.estimator(cond_feats)
            guide = expand_volume(vol, horizon)
        else:
            vol = None
            guide = torch.zeros(conditions.shape[0], horizon, manifest["channels"])
        e_kg_cond = e_kg if manifest["kg_in_condition"] else None
        model.condition.eval()
        cond = model.condition(cond_feats, vol, e_kg_cond)

    def predict(x, n):
        return model.denoiser(x, n, e_kg, cond, adjacency)

    samples = sample(predict, guide, model.schedule, num_samples, seed,
                     clip_x0=manifest["clip_x0"])
    mean = np.asarray(manifest["flow_mean"])
    std = np.asarray(manifest["flow_std"])
    raw = samples.numpy() * std + mean
    return np.maximum(raw, 0.0).astype(np.float32)


class PredictionTrainer:
    """Vanilla-process variant conditioned on a zero-masked history window."""

    def __init__(self, windows_norm: np.ndarray, kg_embeddings,
                 subgraph: RegionSubgraph, schedule: NoiseSchedule,
                 config: TrainConfig, t_in: int = 12, t_out: int = 12,
                 flow_mean=None, flow_std=None):
        config.validate()
        windows_norm = np.asarray(windows_norm, dtype=np.float32)
        if windows_norm.ndim != 4:
            raise TrainerError("windows must be (num_windows, regions, t_in+t_out, channels)")
        if windows_norm.shape[2] != t_in + t_out:
            raise TrainerError(
                f"window length {windows_norm.shape[2]} != t_in+t_out={t_in + t_out}")
        if windows_norm.shape[1] != len(subgraph.region_ids):
            raise TrainerError("windows and subgraph disagree on region count")
        if config.threads:
            torch.set_num_threads(config.threads)
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.config = config
        self.schedule = schedule
        self.t_in, self.t_out = t_in, t_out
        self.windows = torch.as_tensor(windows_norm)
        matrix = _as_embedding_matrix(kg_embeddings, list(subgraph.region_ids))
        self.e_kg = torch.as_tensor(matrix, dtype=torch.float32)
        self.adjacency = dense_adjacency(subgraph)
        channels = windows_norm.shape[-1]
        self.manifest = {
            "format": "flowgen-checkpoint",
            "mode": "prediction",
            "channels": channels,
            "d_fea": 0,
            "d_kg": matrix.shape[1],
            "horizon": t_in + t_out,
            "t_in": t_in,
            "t_out": t_out,
            "num_steps": schedule.num_steps,
            "beta_start": float(schedule.betas[0]),
            "beta_end": float(schedule.betas[-1]),
            "flow_mean": list(np.ravel(flow_mean)) if flow_mean is not None else [0.0] * channels,
            "flow_std": list(np.ravel(flow_std)) if flow_std is not None else [1.0] * channels,
            "clip_x0": config.clip_x0,
            "use_guide": False,
            "kg_in_condition": False,
            **{k: getattr(config, k) for k in
               ("d_h", "num_layers", "heads", "step_mlp_dim", "vol_hidden",
                "use_spatial_fusion", "degree_normalize",
                "temporal_positional")},
        }
        self.denoiser, _, self.condition = _build_modules(self.manifest)
        params = list(self.denoiser.parameters()) + list(self.condition.parameters())
        self.opt = torch.optim.Adam(params, lr=config.lr)
        self.log: list[TrainLogEntry] = []
        self.epoch = 0

    def masked(self, windows: torch.Tensor) -> torch.Tensor:
        out = windows.clone()
        out[..., self.t_in:, :] = 0.0
        return out

    def epoch_step(self) -> float:
        count = self.windows.shape[0]
        order = self.rng.permutation(count)
        total = 0.0
        t0 = time.perf_counter()
        for start in range(0, count, self.config.batch_size):
            idx = torch.as_tensor(order[start:start + self.config.batch_size])
            x0 = self.windows[idx]
            cond = self.condition(self.masked(x0))
            steps = self.rng.integers(1, self.schedule.num_steps + 1, size=len(idx))
            noise = torch.randn(x0.shape)
            x_n = forward_marginal(x0, 0.0, steps, self.schedule, noise)
            eps_hat = self.denoiser(x_n, torch.as_tensor(steps), self.e_kg,
                                    cond, self.adjacency)
            loss = diffusion_loss(eps_hat, noise)
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            total += float(loss.detach()) * len(idx)
        self.epoch += 1
        mean_loss = total / count
        self.log.append(TrainLogEntry(self.epoch, "diffusion", mean_loss,
                                      time.perf_counter() - t0))
        return mean_loss

    def run(self) -> tuple[TrainedModel, list[TrainLogEntry]]:
        while self.epoch < self.config.epochs:
            loss = self.epoch_step()
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {self.epoch}")
        model = TrainedModel(self.denoiser, None, self.condition,
                             self.schedule, dict(self.manifest))
        self.denoiser.eval()
        self.condition.eval()
        return model, self.log


def train_predictive(windows_norm, kg_embeddings, subgraph, schedule, config,
                     t_in: int = 12, t_out: int = 12, flow_mean=None,
                     flow_std=None) -> tuple[TrainedModel, list[TrainLogEntry]]:
    trainer = PredictionTrainer(windows_norm, kg_embeddings, subgraph, schedule,
                                config, t_in, t_out, flow_mean, flow_std)
    return trainer.run()


def predict_future(model: TrainedModel, history_norm: np.ndarray, kg_embeddings,
                   subgraph: RegionSubgraph, num_samples: int = 8, seed: int = 0
                   ) -> np.ndarray:
    """Mean forecast of the future segment from a normalized history window.

    history_norm: (L, t_in, C). Returns (L, t_out, C) in normalized space.
    """
    manifest = model.manifest
    if manifest["mode"] != "prediction":
        raise TrainerError("checkpoint was not trained in prediction mode")
    t_in, t_out = manifest["t_in"], manifest["t_out"]
    history = torch.as_tensor(np.asarray(history_norm, dtype=np.float32))
    if history.shape[-2] != t_in:
        raise TrainerError(f"history length {history.shape[-2]} != t_in={t_in}")
    padded = torch.cat([history, torch.zeros(*history.shape[:-2], t_out,
                                             history.shape[-1])], dim=-2)
    matrix = _as_embedding_matrix(kg_embeddings, list(subgraph.region_ids))
    e_kg = torch.as_tensor(matrix, dtype=torch.float32)
    adjacency = dense_adjacency(subgraph)
    model.denoiser.eval()
    model.condition.eval()
    with torch.no_grad():
        cond = model.condition(padded)
    guide = torch.zeros_like(padded)

    def predict(x, n):
        return model.denoiser(x, n, e_kg, cond, adjacency)

    samples = sample(predict, guide, model.schedule, num_samples, seed,
                     clip_x0=manifest["clip_x0"])
    return samples.mean(dim=0)[..., t_in:, :].numpy()
