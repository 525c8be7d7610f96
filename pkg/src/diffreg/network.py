"""The dual-decoder registration network."""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .backbone import DiffusionDecoder, Encoder, RegistrationDecoder, conv_nd
from .config import BackboneConfig
from .errors import ShapeError
from .fdg import LevelFieldHead, merge_fields

__all__ = ["NetOutput", "RegistrationNet"]


class NetOutput(NamedTuple):
    score: torch.Tensor
    phi: torch.Tensor
    level_fields: list
    diff_features: list
    reg_features: list


class RegistrationNet(nn.Module):
    """Shared encoder feeding a noise-predicting decoder and a registration
    decoder guided by the noise decoder's features.

    ``forward(fixed, moving, x_t, t)`` evaluates the encoder once and returns
    the noise estimate, the merged displacement field and every intermediate
    feature pyramid.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, in_channels=3)
        self.diffusion_decoder = DiffusionDecoder(cfg)
        self.registration_decoder = RegistrationDecoder(cfg)
        dims, groups = cfg.spatial_dims, cfg.groupnorm_groups
        if cfg.use_fdg:
            self.field_heads = nn.ModuleList(LevelFieldHead(dims, c, groups) for c in cfg.channels[::-1])
        else:
            head = conv_nd(dims, cfg.channels[0], dims, 3, padding=1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.field_head = head

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor, x_t: torch.Tensor, t) -> NetOutput:
        if not (fixed.shape == moving.shape == x_t.shape) or fixed.shape[1] != 1:
            raise ShapeError(
                f"fixed, moving and x_t must be matching single-channel images, got "
                f"{tuple(fixed.shape)}, {tuple(moving.shape)}, {tuple(x_t.shape)}"
            )
        enc = self.encoder(torch.cat([fixed, moving, x_t], dim=1), t)
        score, diff_feats = self.diffusion_decoder(enc)
        reg_feats = self.registration_decoder(enc, diff_feats)
        if self.cfg.use_fdg:
            level_fields = [head(r, g) for head, r, g in zip(self.field_heads, reg_feats, diff_feats)]
            phi = merge_fields(level_fields, fixed.shape[2:])
        else:
            phi = self.field_head(reg_feats[-1])
            level_fields = [phi]
        return NetOutput(score, phi, level_fields, diff_feats, reg_feats)
