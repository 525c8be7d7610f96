"""Forward diffusion: noise schedules, perturbed samples and the denoising loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DomainError, ShapeError

__all__ = ["NoiseSchedule", "make_linear_schedule", "sample_perturbed", "diffusion_loss"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances ``betas[s-1]`` for s = 1..T and their cumulative
    signal fractions ``alphas_cum[t] = prod_{s<=t} (1 - beta_s)``.

    ``alphas_cum`` has length ``T + 1``; index 0 is the clean-image level
    (alpha = 1).
    """

    betas: np.ndarray
    alphas_cum: np.ndarray

    def __post_init__(self):
        self.betas.setflags(write=False)
        self.alphas_cum.setflags(write=False)

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def alpha(self, t) -> torch.Tensor:
        """Cumulative signal fraction at step(s) ``t`` as a float64 tensor."""
        t = torch.as_tensor(t)
        if t.dtype.is_floating_point:
            raise DomainError("step index must be an integer")
        if (t < 0).any() or (t > self.num_steps).any():
            raise DomainError(f"step index outside [0, {self.num_steps}]: {t.tolist()}")
        return torch.tensor(self.alphas_cum)[t]


def make_linear_schedule(beta_start: float, beta_end: float, num_steps: int) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})", "schedule")
    if int(num_steps) != num_steps or num_steps < 1:
        raise ConfigError(f"need at least one step, got {num_steps}", "schedule.num_steps")
    betas = np.linspace(beta_start, beta_end, int(num_steps), dtype=np.float64)
    alphas_cum = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas=betas, alphas_cum=alphas_cum)


def sample_perturbed(f: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(alpha_t) * f + sqrt(1 - alpha_t) * eps``.

    ``t`` is a step in 1..T, either a scalar or one step per batch item.
    ``eps`` is standard normal noise supplied by the caller.
    """
    if f.shape != eps.shape:
        raise ShapeError(f"noise {tuple(eps.shape)} does not match image {tuple(f.shape)}")
    t = torch.as_tensor(t)
    if (t < 1).any() or (t > schedule.num_steps).any():
        raise DomainError(f"step index outside [1, {schedule.num_steps}]: {t.tolist()}")
    alpha = schedule.alpha(t).to(dtype=f.dtype, device=f.device)
    if alpha.dim() == 1:
        alpha = alpha.reshape(-1, *([1] * (f.dim() - 1)))
    return alpha.sqrt() * f + (1 - alpha).sqrt() * eps


def diffusion_loss(predicted: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the predicted and the injected noise."""
    if predicted.shape != eps.shape:
        raise ShapeError(f"prediction {tuple(predicted.shape)} does not match noise {tuple(eps.shape)}")
    return F.mse_loss(predicted, eps)
