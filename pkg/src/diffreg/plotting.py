"""Figure rendering for ablation tables and registration panels."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from matplotlib import colormaps
from matplotlib.figure import Figure

from .ablation import aggregate
from .errors import DomainError
from .grid import jacobian_determinant

__all__ = ["FOLD_COLOR", "plot_variant_bars", "plot_gamma_sweep", "plot_registration_panels", "det_rgb"]

# colour used for voxels whose Jacobian determinant is not positive
FOLD_COLOR = (1.0, 0.0, 1.0)


def _require(rows: Sequence[dict]) -> dict:
    if not rows:
        raise DomainError("results are empty; nothing to plot")
    return aggregate(rows)


def plot_variant_bars(rows: Sequence[dict], path, variants: Sequence[str] = ("full", "no_fdg", "no_sdg")) -> Path:
    """Dice and folding bars per variant, with seed spread as error bars."""
    agg = _require(rows)
    present = [v for v in variants if v in agg]
    if not present:
        raise DomainError(f"none of the variants {list(variants)} appear in the results")
    fig = Figure(figsize=(8, 3.2))
    axes = fig.subplots(1, 2)
    for ax, metric, label in zip(axes, ("dice_mean", "folding_percent"), ("mean Dice", "folding (%)")):
        vals = [np.asarray(agg[v][metric]) for v in present]
        ax.bar(range(len(present)), [x.mean() for x in vals], yerr=[x.std() for x in vals], capsize=3,
               color="0.6")
        ax.set_xticks(range(len(present)), present)
        ax.set_ylabel(label)
    fig.tight_layout()
    return _save(fig, path)


def plot_gamma_sweep(rows: Sequence[dict], path) -> Path:
    """Mean metric against the score exponent, one panel per metric."""
    agg = _require(rows)
    gammas = sorted((float(v.split("=", 1)[1]), v) for v in agg if v.startswith("gamma="))
    if not gammas:
        raise DomainError("results hold no gamma=<value> variants")
    xs = [g for g, _ in gammas]
    fig = Figure(figsize=(10, 3))
    axes = fig.subplots(1, 3)
    for ax, metric in zip(axes, ("dice_mean", "folding_percent", "jacobian_sd")):
        ys = [np.mean(agg[v][metric]) for _, v in gammas]
        ax.plot(xs, ys, marker="o", color="k")
        ax.set_xlabel("gamma")
        ax.set_title(metric)
    fig.tight_layout()
    return _save(fig, path)


def det_rgb(det: np.ndarray, vmax: float = 2.0) -> np.ndarray:
    """RGB image of a 2D determinant map; non-positive entries get ``FOLD_COLOR``."""
    norm = np.clip(det / vmax, 0.0, 1.0)
    rgb = colormaps["viridis"](norm)[..., :3]
    rgb[det <= 0] = FOLD_COLOR
    return rgb


def _central_slice(x: torch.Tensor) -> np.ndarray:
    # x: (*S); 3D volumes are cut through the middle of the last axis
    a = x.detach().cpu().double().numpy()
    if a.ndim == 3:
        a = a[..., a.shape[-1] // 2]
    return a


def plot_registration_panels(fixed: torch.Tensor, moving: torch.Tensor, warped: torch.Tensor, phi: torch.Tensor,
                             path) -> Path:
    """Fixed, moving, warped and determinant panels for one pair.

    Image tensors are ``(1, 1, *S)``, ``phi`` is ``(1, D, *S)``.
    """
    det = jacobian_determinant(phi.double())[0, 0]
    panels = [_central_slice(t[0, 0]) for t in (fixed, moving, warped)]
    det_slice = _central_slice(det)
    fig = Figure(figsize=(12, 3.2))
    axes = fig.subplots(1, 4)
    for ax, img, title in zip(axes, panels, ("fixed", "moving", "warped")):
        ax.imshow(img, cmap="gray", vmin=-1, vmax=1)
        ax.set_title(title)
    axes[3].imshow(det_rgb(det_slice))
    axes[3].set_title(f"det J (<=0: {int((det_slice <= 0).sum())} px)")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    return path
