"""Ablation runner: train each variant under several seeds, score held-out pairs."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .errors import ConfigError, DomainError
from .metrics import append_results
from .pipeline import Trainer, evaluate

__all__ = [
    "VARIANTS",
    "SUMMARY_FIELDS",
    "METRICS",
    "variant_config",
    "run_ablation",
    "read_summary",
    "aggregate",
]

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_fdg", "no_sdg", "gamma=0.5", "gamma=1", "gamma=2")
METRICS = ("dice_mean", "folding_percent", "jacobian_sd")
SUMMARY_FIELDS = ("variant", "seed", "metric", "value")


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    """Config for one ablation arm.

    ``full`` keeps ``base`` as is; ``no_fdg`` drops the diffusion-feature
    guidance; ``no_sdg`` sets the score exponent to zero; ``gamma=<g>`` sets it.
    """
    changes: dict = {"seed": seed}
    if variant == "full":
        pass
    elif variant == "no_fdg":
        changes["backbone.use_fdg"] = False
    elif variant == "no_sdg":
        changes["loss.gamma"] = 0.0
    elif variant.startswith("gamma="):
        try:
            changes["loss.gamma"] = float(variant.split("=", 1)[1])
        except ValueError:
            raise ConfigError(f"unknown variant {variant!r}", "variants") from None
    else:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}", "variants")
    return base.replace(**changes)


def _config_key(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def run_ablation(base: TrainConfig, train_pairs: Sequence[dict], test_pairs: Sequence[dict],
                 variants: Sequence[str], seeds: Sequence[int], out_dir, class_ids: Sequence[int]) -> list[dict]:
    """Train and evaluate every (variant, seed); write the results files.

    Writes ``ablation_results.csv`` (one row per variant, seed and metric,
    holding the mean over held-out pairs) and ``pair_results.csv`` (one row per
    held-out pair). Variants that resolve to the same config share one run.
    Returns the summary rows.
    """
    if not seeds:
        raise DomainError("at least one seed is required")
    configs = {(v, s): variant_config(base, v, s) for v in variants for s in seeds}
    if not test_pairs:
        raise DomainError("no held-out pairs to evaluate")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pair_path = out_dir / "pair_results.csv"
    if pair_path.exists():
        pair_path.unlink()
    cache: dict[str, list[dict]] = {}
    summary = []
    for (variant, seed), cfg in configs.items():
        key = _config_key(cfg)
        if key not in cache:
            log.info("training %s seed %d", variant, seed)
            trainer = Trainer(cfg, train_pairs)
            trainer.fit()
            cache[key] = evaluate(trainer.model, test_pairs, class_ids)
        rows = cache[key]
        run_id = f"{variant}/seed{seed}"
        for r in rows:
            append_results(pair_path, run_id, r["pair_id"], r)
        for metric in METRICS:
            value = float(np.mean([r[metric] for r in rows]))
            summary.append({"variant": variant, "seed": seed, "metric": metric, "value": value})
    with (out_dir / "ablation_results.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for row in summary:
            writer.writerow({**row, "value": f"{row['value']:.9g}"})
    return summary


def read_summary(path) -> list[dict]:
    """Rows of an ``ablation_results.csv`` with float values."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"results file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(SUMMARY_FIELDS):
        raise ConfigError(f"unexpected columns {sorted(rows[0])}", str(path))
    return [{"variant": r["variant"], "seed": int(r["seed"]), "metric": r["metric"], "value": float(r["value"])}
            for r in rows]


def aggregate(rows: Sequence[dict]) -> dict[str, dict[str, list[float]]]:
    """``{variant: {metric: [value per seed, in seed order]}}``."""
    out: dict[str, dict[str, list[tuple[int, float]]]] = {}
    for r in rows:
        out.setdefault(r["variant"], {}).setdefault(r["metric"], []).append((r["seed"], r["value"]))
    return {v: {m: [x for _, x in sorted(vals)] for m, vals in ms.items()} for v, ms in out.items()}
