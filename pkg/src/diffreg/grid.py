"""Geometric kernels on dense grids: warping, displacement gradients, Jacobians.

All kernels work on batched tensors. Images are ``(B, C, *S)`` and
displacement fields are ``(B, D, *S)`` with ``D = len(S)`` in {2, 3}.
Component ``i`` of a field displaces along spatial axis ``i`` (the axis at
tensor dim ``2 + i``), measured in voxels.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import DomainError, ShapeError

__all__ = [
    "Volume",
    "check_field",
    "identity_grid",
    "warp",
    "spatial_gradient",
    "smoothness_penalty",
    "jacobian_determinant",
]


@dataclass(frozen=True)
class Volume:
    """A single image, label map or score map with physical spacing.

    ``data`` is laid out as ``(channel, *spatial)``; ``spacing`` gives the
    physical voxel size per spatial axis in mm.
    """

    data: torch.Tensor
    spacing: tuple[float, ...] = field(default=None)
    is_label: bool = False

    def __post_init__(self):
        if self.data.dim() not in (3, 4):
            raise ShapeError(f"volume must be (C, *S) with 2 or 3 spatial axes, got {tuple(self.data.shape)}")
        if any(s < 1 for s in self.data.shape):
            raise ShapeError(f"empty extent {tuple(self.data.shape)}")
        spacing = self.spacing
        if spacing is None:
            spacing = (1.0,) * (self.data.dim() - 1)
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != self.data.dim() - 1:
            raise ShapeError(f"spacing {spacing} does not match {self.data.dim() - 1} spatial axes")
        if any(not s > 0 for s in spacing):
            raise DomainError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        if self.is_label and not torch.equal(self.data, torch.round(self.data)):
            raise DomainError("label volume contains non-integer values")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    @property
    def ndim(self) -> int:
        return self.data.dim() - 1

    def batched(self) -> torch.Tensor:
        return self.data.unsqueeze(0)


def check_field(phi: torch.Tensor, spatial_shape: Sequence[int] | None = None) -> None:
    """Validate a displacement field's layout and values."""
    if phi.dim() not in (4, 5):
        raise ShapeError(f"field must be (B, D, *S) with D in {{2, 3}}, got {tuple(phi.shape)}")
    ndim = phi.dim() - 2
    if phi.shape[1] != ndim:
        raise ShapeError(f"field has {phi.shape[1]} components for {ndim} spatial axes")
    if spatial_shape is not None and tuple(phi.shape[2:]) != tuple(spatial_shape):
        raise ShapeError(f"field extent {tuple(phi.shape[2:])} != image extent {tuple(spatial_shape)}")
    if not torch.isfinite(phi).all():
        raise DomainError("displacement field contains non-finite values")


def identity_grid(shape: Sequence[int], dtype=None, device=None) -> torch.Tensor:
    """Voxel index coordinates, ``(D, *shape)``."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def warp(image: torch.Tensor, phi: torch.Tensor, mode: str = "linear") -> torch.Tensor:
    """Backward-warp ``image`` by ``phi``: ``out(x) = image(x + phi(x))``.

    ``mode="linear"`` interpolates multilinearly and is differentiable in both
    arguments; ``mode="nearest"`` rounds sample positions and is meant for
    label maps. Sample positions outside the grid are clamped to the border.
    """
    if mode not in ("linear", "nearest"):
        raise DomainError(f"unknown interpolation mode {mode!r}")
    if image.dim() != phi.dim():
        raise ShapeError(f"image {tuple(image.shape)} and field {tuple(phi.shape)} differ in rank")
    check_field(phi, image.shape[2:])
    if image.shape[0] != phi.shape[0]:
        raise ShapeError(f"batch sizes differ: {image.shape[0]} vs {phi.shape[0]}")

    B, C = image.shape[:2]
    shape = tuple(image.shape[2:])
    ndim = len(shape)
    strides = [1] * ndim
    for d in range(ndim - 2, -1, -1):
        strides[d] = strides[d + 1] * shape[d + 1]

    coords = identity_grid(shape, dtype=phi.dtype, device=phi.device) + phi
    flat = image.reshape(B, C, -1)

    def gather(index):
        index = index.reshape(B, 1, -1).expand(B, C, -1)
        return torch.gather(flat, 2, index).reshape(B, C, *shape)

    if mode == "nearest":
        index = 0
        for d in range(ndim):
            c = torch.round(coords[:, d]).clamp(0, shape[d] - 1).long()
            index = index + c * strides[d]
        return gather(index)

    lower, upper, frac = [], [], []
    for d in range(ndim):
        c = coords[:, d].clamp(0, shape[d] - 1)
        i0 = torch.floor(c).detach()
        lower.append(i0.long())
        upper.append((i0 + 1).clamp(max=shape[d] - 1).long())
        frac.append(c - i0)

    out = None
    for corner in itertools.product((0, 1), repeat=ndim):
        index = 0
        weight = None
        for d, bit in enumerate(corner):
            index = index + (upper[d] if bit else lower[d]) * strides[d]
            w = frac[d] if bit else 1 - frac[d]
            weight = w if weight is None else weight * w
        term = weight.unsqueeze(1) * gather(index)
        out = term if out is None else out + term
    return out


def spatial_gradient(phi: torch.Tensor) -> torch.Tensor:
    """Forward differences of every component along every axis.

    Returns ``(B, D, D, *S)`` where entry ``[:, i, j]`` approximates
    ``d phi_i / d x_j``. The last slice along each axis repeats the previous
    difference so the output keeps the field's extent.
    """
    if phi.dim() not in (4, 5) or phi.shape[1] != phi.dim() - 2:
        raise ShapeError(f"field must be (B, D, *S) with D spatial axes, got {tuple(phi.shape)}")
    if any(n < 2 for n in phi.shape[2:]):
        raise DomainError(f"need extent >= 2 along every axis, got {tuple(phi.shape[2:])}")
    rows = []
    for axis in range(2, phi.dim()):
        diff = torch.diff(phi, dim=axis)
        last = diff.narrow(axis, diff.shape[axis] - 1, 1)
        rows.append(torch.cat([diff, last], dim=axis))
    # stack over derivative axis j -> (B, D_i, D_j, *S)
    return torch.stack(rows, dim=2)


def smoothness_penalty(phi: torch.Tensor) -> torch.Tensor:
    """Mean over voxels of the squared Frobenius norm of the field gradient."""
    grad = spatial_gradient(phi)
    return grad.pow(2).sum(dim=(1, 2)).mean()


def jacobian_determinant(phi: torch.Tensor) -> torch.Tensor:
    """``det(I + grad phi)`` per voxel, shaped ``(B, 1, *S)``."""
    g = spatial_gradient(phi)
    ndim = phi.shape[1]
    j = [[g[:, r, c] + (1.0 if r == c else 0.0) for c in range(ndim)] for r in range(ndim)]
    if ndim == 2:
        det = j[0][0] * j[1][1] - j[0][1] * j[1][0]
    else:
        det = (
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        )
    return det.unsqueeze(1)
