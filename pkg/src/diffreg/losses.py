"""Registration objective: windowed NCC, its score-weighted form, and the
combined training loss."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import LossWeights
from .errors import ConfigError, DomainError, ShapeError

__all__ = ["NCC_EPS", "box_sum", "local_ncc_map", "score_ncc_loss", "total_loss"]

NCC_EPS = 1e-5


def box_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    """Sum over a centred ``window``-wide box, zero-padded at the borders."""
    ndim = x.dim() - 2
    C = x.shape[1]
    kernel = torch.ones((C, 1) + (window,) * ndim, dtype=x.dtype, device=x.device)
    conv = F.conv2d if ndim == 2 else F.conv3d
    return conv(x, kernel, padding=window // 2, groups=C)


def local_ncc_map(a: torch.Tensor, b: torch.Tensor, window: int = 9, eps: float = NCC_EPS) -> torch.Tensor:
    """Squared local correlation coefficient per voxel, in [0, 1].

    Windows where either image is (nearly) constant score 0.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd, got {window}", "loss.ncc_window")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    n = float(window ** (a.dim() - 2))
    a_sum, b_sum = box_sum(a, window), box_sum(b, window)
    cross = box_sum(a * b, window) - a_sum * b_sum / n
    a_var = box_sum(a * a, window) - a_sum * a_sum / n
    b_var = box_sum(b * b, window) - b_sum * b_sum / n
    cc = cross * cross / (a_var * b_var + eps)
    degenerate = (a_var < eps) | (b_var < eps)
    return torch.where(degenerate, torch.zeros_like(cc), cc).clamp(0.0, 1.0)


def score_ncc_loss(warped: torch.Tensor, fixed: torch.Tensor, score: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Negative local NCC, reweighted voxelwise by ``sigmoid(score) ** gamma``.

    The score only scales the loss; no gradient flows back into it.
    """
    if score.shape != warped.shape:
        raise ShapeError(f"score {tuple(score.shape)} does not match image {tuple(warped.shape)}")
    ncc = local_ncc_map(warped, fixed, weights.ncc_window)
    if weights.gamma == 0:
        return -ncc.mean()
    weight = torch.sigmoid(score.detach()) ** weights.gamma
    return (weight * -ncc).mean()


def total_loss(diff_loss, score_ncc, smooth, weights: LossWeights) -> torch.Tensor:
    """``diff_loss + lambda * score_ncc + lambda_phi * smooth``."""
    for name, value in (("diffusion", diff_loss), ("score_ncc", score_ncc), ("smoothness", smooth)):
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not torch.isfinite(v).all():
            raise DomainError(f"non-finite {name} loss: {v.tolist()}")
    return diff_loss + weights.lam * score_ncc + weights.lambda_phi * smooth

