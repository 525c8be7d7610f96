"""Evaluation metrics: label overlap and Jacobian-based field regularity."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ShapeError
from .grid import jacobian_determinant

__all__ = ["dice", "folding_percent", "jacobian_sd", "evaluate_pair", "RESULT_FIELDS", "append_results"]


def _as_array(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def dice(pred_labels, true_labels, class_ids: Iterable[int], include_union: bool = False) -> dict:
    """Per-class Dice overlap plus their mean under key ``"mean"``.

    A class absent from both maps scores 1. With ``include_union`` the union
    of all listed classes is scored as one extra region (key ``"union"``) and
    enters the mean.
    """
    a, b = _as_array(pred_labels), _as_array(true_labels)
    if a.shape != b.shape:
        raise ShapeError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    class_ids = [int(c) for c in class_ids]
    regions = {c: (a == c, b == c) for c in class_ids}
    if include_union:
        regions["union"] = (np.isin(a, class_ids), np.isin(b, class_ids))
    scores = {}
    for key, (ma, mb) in regions.items():
        total = int(ma.sum()) + int(mb.sum())
        scores[key] = 1.0 if total == 0 else 2.0 * int(np.logical_and(ma, mb).sum()) / total
    scores["mean"] = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores


def folding_percent(phi: torch.Tensor) -> float:
    """Percentage of voxels whose Jacobian determinant is non-positive."""
    det = jacobian_determinant(phi.detach())
    return 100.0 * int((det <= 0).sum()) / det.numel()


def jacobian_sd(phi: torch.Tensor) -> float:
    """Population standard deviation of the Jacobian determinant."""
    det = jacobian_determinant(phi.detach().double())
    return float(det.std(unbiased=False))


RESULT_FIELDS = ("run_id", "pair_id", "dice_per_class", "dice_mean", "folding_percent", "jacobian_sd")


def evaluate_pair(phi, warped_labels, fixed_labels, class_ids: Sequence[int], include_union: bool = False) -> dict:
    scores = dice(warped_labels, fixed_labels, class_ids, include_union)
    per_class = {k: v for k, v in scores.items() if k != "mean"}
    return {
        "dice_per_class": per_class,
        "dice_mean": scores["mean"],
        "folding_percent": folding_percent(phi),
        "jacobian_sd": jacobian_sd(phi),
    }


def append_results(path, run_id: str, pair_id: str, result: dict) -> None:
    """Append one evaluation row to a comma-separated results file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    per_class = ";".join(f"{k}={v:.6f}" for k, v in result["dice_per_class"].items())
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(RESULT_FIELDS)
        writer.writerow([
            run_id,
            pair_id,
            per_class,
            f"{result['dice_mean']:.6f}",
            f"{result['folding_percent']:.6f}",
            f"{result['jacobian_sd']:.6f}",
        ])
