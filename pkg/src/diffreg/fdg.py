"""Feature-guided field estimation: per-level cross-attention heads and
multi-scale field merging."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import conv_nd
from .errors import DomainError, ShapeError

__all__ = ["linear_cross_attention", "LevelFieldHead", "merge_fields"]


def linear_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Efficient attention over flattened voxels.

    ``q`` and ``k`` are ``(B, Ck, n)``, ``v`` is ``(B, Cv, n)``. Keys are
    softmax-normalised over voxels and queries over channels; the global
    context ``softmax(k) @ v^T`` is ``Ck x Cv``, so the cost is linear in n.
    """
    k = torch.softmax(k, dim=-1)
    q = torch.softmax(q, dim=1)
    context = torch.bmm(k, v.transpose(1, 2))
    return torch.bmm(context.transpose(1, 2), q)


class LevelFieldHead(nn.Module):
    """Displacement field for one decoder level.

    Queries come from the registration feature, keys and values from the
    group-normalised diffusion feature. The attended result is added back to
    the registration feature and a zero-initialised convolution maps it to
    ``spatial_dims`` displacement channels.
    """

    def __init__(self, dims: int, channels: int, groups: int):
        super().__init__()
        self.dims = dims
        self.norm = nn.GroupNorm(groups, channels, affine=False)
        self.to_q = conv_nd(dims, channels, channels, 1, bias=False)
        self.to_k = conv_nd(dims, channels, channels, 1, bias=False)
        self.to_v = conv_nd(dims, channels, channels, 1, bias=False)
        self.proj = conv_nd(dims, channels, channels, 1, bias=False)
        self.to_field = conv_nd(dims, channels, dims, 3, padding=1)
        nn.init.zeros_(self.to_field.weight)
        nn.init.zeros_(self.to_field.bias)

    def attend(self, reg_feat: torch.Tensor, diff_feat: torch.Tensor) -> torch.Tensor:
        """Residual attention output before the field convolution."""
        if reg_feat.shape != diff_feat.shape:
            raise ShapeError(f"feature shapes differ: {tuple(reg_feat.shape)} vs {tuple(diff_feat.shape)}")
        B, C = reg_feat.shape[:2]
        g = self.norm(diff_feat)
        q = self.to_q(reg_feat).reshape(B, C, -1)
        k = self.to_k(g).reshape(B, C, -1)
        v = self.to_v(g).reshape(B, C, -1)
        attn = linear_cross_attention(q, k, v).reshape(reg_feat.shape)
        return self.proj(attn) + reg_feat

    def forward(self, reg_feat: torch.Tensor, diff_feat: torch.Tensor) -> torch.Tensor:
        return self.to_field(self.attend(reg_feat, diff_feat))


def merge_fields(fields: Sequence[torch.Tensor], shape: Sequence[int] | None = None) -> torch.Tensor:
    """Upsample every level's field to full resolution and average them.

    Displacements are in voxels of their own grid, so each component is
    multiplied by the upsampling factor along its axis. ``shape`` defaults to
    the largest extent present.
    """
    if len(fields) == 0:
        raise DomainError("no fields to merge")
    ndim = fields[0].dim() - 2
    if shape is None:
        shape = max((tuple(f.shape[2:]) for f in fields), key=lambda s: torch.Size(s).numel())
    shape = tuple(shape)
    resized = []
    for phi in fields:
        if phi.dim() != ndim + 2 or phi.shape[1] != ndim:
            raise ShapeError(f"field shape {tuple(phi.shape)} is not a {ndim}D displacement field")
        src = tuple(phi.shape[2:])
        if src == shape:
            resized.append(phi)
            continue
        if any(n % s for n, s in zip(shape, src)):
            raise ShapeError(f"level extent {src} does not divide full extent {shape}")
        mode = "bilinear" if ndim == 2 else "trilinear"
        up = F.interpolate(phi, size=shape, mode=mode, align_corners=False)
        scale = torch.tensor([n / s for n, s in zip(shape, src)], dtype=phi.dtype, device=phi.device)
        resized.append(up * scale.reshape(1, ndim, *([1] * ndim)))
    if len(resized) == 1:
        return resized[0]
    return torch.stack(resized).mean(dim=0)
