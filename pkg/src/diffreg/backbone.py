"""Time-conditioned UNet pieces: a shared encoder and two decoders.

Feature pyramids are lists ordered deepest level first, so ``pyramid[0]`` is
the coarsest map and ``pyramid[-1]`` sits at input resolution.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .config import BackboneConfig
from .errors import ShapeError

__all__ = [
    "timestep_embedding",
    "conv_nd",
    "ResBlock",
    "Encoded",
    "Encoder",
    "DiffusionDecoder",
    "RegistrationDecoder",
]


def conv_nd(dims: int, *args, **kwargs) -> nn.Module:
    return (nn.Conv2d if dims == 2 else nn.Conv3d)(*args, **kwargs)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, ``(B,) -> (B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, dims: int, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.in_channels = in_ch
        self.out_channels = out_ch
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = conv_nd(dims, in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = conv_nd(dims, out_ch, out_ch, 3, padding=1)
        self.skip = conv_nd(dims, in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb)).reshape(h.shape[0], -1, *([1] * (x.dim() - 2)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Upsample(nn.Module):
    """Nearest-neighbour doubling followed by a 3x3 convolution."""

    def __init__(self, dims: int, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = conv_nd(dims, in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoded(NamedTuple):
    z: torch.Tensor
    skips: list
    temb: torch.Tensor


class Encoder(nn.Module):
    """Shared encoder over the channel stack ``{f, m, x_t}``."""

    def __init__(self, cfg: BackboneConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        dims, groups, temb = cfg.spatial_dims, cfg.groupnorm_groups, cfg.time_embed_dim
        ch = cfg.channels
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.in_conv = conv_nd(dims, in_channels, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for k, c in enumerate(ch):
            self.blocks.append(ResBlock(dims, prev, c, temb, groups))
            if k < len(ch) - 1:
                self.downs.append(conv_nd(dims, c, c, 3, stride=2, padding=1))
            prev = c
        self.middle = ResBlock(dims, ch[-1], ch[-1], temb, groups)

    def forward(self, x_in: torch.Tensor, t: torch.Tensor) -> Encoded:
        if x_in.dim() != self.cfg.spatial_dims + 2:
            raise ShapeError(f"expected {self.cfg.spatial_dims}D input, got shape {tuple(x_in.shape)}")
        self.cfg.check_extent(x_in.shape[2:])
        t = torch.as_tensor(t, device=x_in.device).reshape(-1).expand(x_in.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim).to(x_in.dtype))
        h = self.in_conv(x_in)
        skips = []
        for k, block in enumerate(self.blocks):
            h = block(h, temb)
            skips.append(h)
            if k < len(self.downs):
                h = self.downs[k](h)
        z = self.middle(h, temb)
        return Encoded(z, skips[::-1], temb)


class DiffusionDecoder(nn.Module):
    """Predicts the injected noise; exposes the feature of every level."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        dims, groups, temb = cfg.spatial_dims, cfg.groupnorm_groups, cfg.time_embed_dim
        ch = cfg.channels[::-1]
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i, c in enumerate(ch):
            if i > 0:
                self.ups.append(Upsample(dims, ch[i - 1], c))
            self.blocks.append(ResBlock(dims, 2 * c, c, temb, groups))
        self.out_norm = nn.GroupNorm(groups, ch[-1])
        self.out_conv = conv_nd(dims, ch[-1], 1, 3, padding=1)

    def forward(self, enc: Encoded) -> tuple[torch.Tensor, list]:
        if len(enc.skips) != len(self.blocks):
            raise ShapeError(f"{len(enc.skips)} skip features for {len(self.blocks)} levels")
        feats = []
        h = enc.z
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = self.ups[i - 1](h)
            h = block(torch.cat([h, enc.skips[i]], dim=1), enc.temb)
            feats.append(h)
        score = self.out_conv(F.silu(self.out_norm(h)))
        return score, feats


class RegistrationDecoder(nn.Module):
    """Level ``i`` applies ``r_i`` to ``concat(up(F_R^{i-1}), F_E^i, F_G^i)``.

    The deepest level takes the bottleneck ``z`` in place of the (nonexistent)
    previous registration feature. With ``use_fdg=False`` the diffusion
    features are left out of the concatenation.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        dims, groups, temb = cfg.spatial_dims, cfg.groupnorm_groups, cfg.time_embed_dim
        self.use_fdg = cfg.use_fdg
        ch = cfg.channels[::-1]
        parts = 3 if cfg.use_fdg else 2
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i, c in enumerate(ch):
            if i > 0:
                self.ups.append(Upsample(dims, ch[i - 1], c))
            self.blocks.append(ResBlock(dims, parts * c, c, temb, groups))

    def forward(self, enc: Encoded, diff_feats: list | None) -> list:
        n = len(self.blocks)
        if len(enc.skips) != n:
            raise ShapeError(f"{len(enc.skips)} skip features for {n} levels")
        if self.use_fdg and (diff_feats is None or len(diff_feats) != n):
            got = None if diff_feats is None else len(diff_feats)
            raise ShapeError(f"expected {n} diffusion features, got {got}")
        feats = []
        h = enc.z
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = self.ups[i - 1](h)
            parts = [h, enc.skips[i]]
            if self.use_fdg:
                parts.append(diff_feats[i])
            h = block(torch.cat(parts, dim=1), enc.temb)
            feats.append(h)
        return feats
