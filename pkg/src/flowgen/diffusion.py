"""Noise schedule and the volume-guided diffusion process.

The forward marginal shifts the standard noising path toward a per-region
volume guide g, so the chain's endpoint is Normal(g, I) instead of Normal(0, I):

    x_n = sqrt(abar_n) * x0 + (1 - sqrt(abar_n)) * g + sqrt(1 - abar_n) * eps

With g = 0 every formula here reduces exactly to the vanilla process. The
reverse step uses the three-term posterior mean over (x0_hat, x_n, g) whose
coefficients sum to one, with variance beta_tilde_n.

Functions accept numpy arrays or torch tensors interchangeably; schedule
coefficients are float64 scalars (or gathered arrays for batched steps), so
gradients flow through tensor arguments untouched.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .blobio import atomic_write_text


class ScheduleError(ValueError):
    pass


class SamplingDivergedError(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite values during sampling at step n={step}")


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar sequences; index n-1 stores step n, n in [1, N]."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def _check(self, n: int, low: int = 1) -> None:
        if not low <= n <= self.num_steps:
            raise ScheduleError(f"step n={n} outside [{low}, {self.num_steps}]")

    def beta(self, n: int) -> float:
        self._check(n)
        return float(self.betas[n - 1])

    def alpha(self, n: int) -> float:
        self._check(n)
        return float(self.alphas[n - 1])

    def alpha_bar(self, n: int) -> float:
        """Cumulative product; alpha_bar(0) = 1 by convention."""
        if n == 0:
            return 1.0
        self._check(n)
        return float(self.alpha_bars[n - 1])

    def beta_tilde(self, n: int) -> float:
        """Posterior variance (1 - abar_{n-1}) / (1 - abar_n) * beta_n."""
        self._check(n)
        return (1.0 - self.alpha_bar(n - 1)) / (1.0 - self.alpha_bar(n)) * self.beta(n)


def make_linear_schedule(num_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if num_steps < 1:
        raise ScheduleError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _gather(values: np.ndarray, n, like):
    """Scalar float for int n; else per-sample coefficients shaped to
    broadcast over the trailing dims of `like` (batch axis first)."""
    if np.isscalar(n) or getattr(n, "ndim", 0) == 0:
        n = int(n)
        if not 1 <= n <= len(values):
            raise ScheduleError(f"step n={n} outside [1, {len(values)}]")
        return float(values[n - 1])
    idx = np.asarray(n, dtype=np.int64) - 1
    if np.any(idx < 0) or np.any(idx >= len(values)):
        raise ScheduleError("batched step index outside [1, N]")
    coeff = values[idx].reshape((-1,) + (1,) * (like.ndim - 1))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(coeff, dtype=like.dtype, device=like.device)
    return coeff


def forward_marginal(x0, guide, n, schedule: NoiseSchedule, noise):
    """Noised sample at step n given clean data, volume guide and unit noise."""
    sqrt_ab = _gather(np.sqrt(schedule.alpha_bars), n, x0)
    sqrt_1m = _gather(np.sqrt(1.0 - schedule.alpha_bars), n, x0)
    return sqrt_ab * x0 + (1.0 - sqrt_ab) * guide + sqrt_1m * noise


def predict_x0(x_n, predicted_noise, guide, n, schedule: NoiseSchedule):
    """Algebraic inverse of forward_marginal given the noise estimate."""
    sqrt_ab = _gather(np.sqrt(schedule.alpha_bars), n, x_n)
    sqrt_1m = _gather(np.sqrt(1.0 - schedule.alpha_bars), n, x_n)
    return (x_n - (1.0 - sqrt_ab) * guide - sqrt_1m * predicted_noise) / sqrt_ab


def posterior_coefficients(n: int, schedule: NoiseSchedule) -> tuple[float, float, float]:
    """Weights of (x0_hat, x_n, guide) in the reverse-step mean; they sum to 1."""
    schedule._check(n, low=2)
    ab_n = schedule.alpha_bar(n)
    ab_prev = schedule.alpha_bar(n - 1)
    beta_n = schedule.beta(n)
    alpha_n = schedule.alpha(n)
    c_x0 = math.sqrt(ab_prev) * beta_n / (1.0 - ab_n)
    c_xn = math.sqrt(alpha_n) * (1.0 - ab_prev) / (1.0 - ab_n)
    c_guide = 1.0 + (math.sqrt(ab_n) - 1.0) * (math.sqrt(alpha_n) + math.sqrt(ab_prev)) / (1.0 - ab_n)
    return c_x0, c_xn, c_guide


def posterior_mean(x_n, x0_hat, guide, n: int, schedule: NoiseSchedule):
    c_x0, c_xn, c_guide = posterior_coefficients(n, schedule)
    return c_x0 * x0_hat + c_xn * x_n + c_guide * guide


def diffusion_loss(predicted_noise, true_noise):
    """Mean absolute deviation (the L1 noise-matching objective)."""
    return abs(predicted_noise - true_noise).mean()


def volume_loss(predicted_volume, true_volume):
    """Mean squared deviation (the volume-estimation objective)."""
    return ((predicted_volume - true_volume) ** 2).mean()


def true_volume(x0):
    """Average flow per hour, broadcast back over the horizon axis."""
    if isinstance(x0, torch.Tensor):
        return x0.mean(dim=-2, keepdim=True).expand_as(x0)
    x0 = np.asarray(x0)
    mean = x0.mean(axis=-2, keepdims=True)
    return np.broadcast_to(mean, x0.shape).copy()


def sample(
    predict_noise: Callable[[torch.Tensor, int], torch.Tensor],
    guide,
    schedule: NoiseSchedule,
    num_samples: int,
    seed: int = 0,
    clip_x0: float | None = 6.0,
) -> torch.Tensor:
    """Run the reverse chain from x_N ~ Normal(guide, I).

    `predict_noise(x, n)` must map a (num_samples, *guide.shape) batch at step
    n to the noise estimate. Steps N..2 apply the posterior mean plus
    sqrt(beta_tilde_n) noise; the final step returns x0_hat directly. x0_hat
    is optionally clipped to [-clip_x0, clip_x0] (normalized units) to keep a
    poorly trained denoiser from diverging. Fixed seeds reproduce exactly.
    """
    guide_t = torch.as_tensor(np.asarray(guide), dtype=torch.float32) \
        if not isinstance(guide, torch.Tensor) else guide
    shape = (num_samples,) + tuple(guide_t.shape)
    if num_samples == 0:
        return torch.empty(shape)
    gen = torch.Generator().manual_seed(seed)
    x = guide_t + torch.randn(shape, generator=gen, dtype=guide_t.dtype)
    n_steps = schedule.num_steps
    with torch.no_grad():
        for n in range(n_steps, 0, -1):
            eps_hat = predict_noise(x, n)
            if not torch.isfinite(eps_hat).all():
                raise SamplingDivergedError(n)
            x0_hat = predict_x0(x, eps_hat, guide_t, n, schedule)
            if clip_x0 is not None:
                x0_hat = x0_hat.clamp(-clip_x0, clip_x0)
            if n > 1:
                z = torch.randn(shape, generator=gen, dtype=guide_t.dtype)
                sigma = math.sqrt(schedule.beta_tilde(n))
                x = posterior_mean(x, x0_hat, guide_t, n, schedule) + sigma * z
            else:
                x = x0_hat
            if not torch.isfinite(x).all():
                raise SamplingDivergedError(n)
    return x


def save_samples(path, samples: np.ndarray, sidecar: dict) -> None:
    """Compressed array blob plus a JSON sidecar (seed, schedule, norm stats)."""
    path = os.fspath(path)
    tmp = os.path.splitext(path)[0] + ".part.npz"
    np.savez_compressed(tmp, samples=np.asarray(samples, dtype=np.float32))
    os.replace(tmp, path)
    atomic_write_text(os.path.splitext(path)[0] + ".json",
                      json.dumps(sidecar, indent=2, sort_keys=True))


def load_samples(path) -> tuple[np.ndarray, dict]:
    path = os.fspath(path)
    with np.load(path) as data:
        samples = data["samples"]
    with open(os.path.splitext(path)[0] + ".json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    return samples, sidecar
