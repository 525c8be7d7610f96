"""Command-line front end.

Exit codes: 0 success, 1 user error (bad flags, config, missing files),
2 internal error. Failures print one line ``error: <kind>: <reason>`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .ablation import VARIANTS, aggregate, read_summary, run_ablation
from .config import TrainConfig, load_config
from .data import (
    PHANTOM_CLASSES,
    PhantomSpec,
    load_pairs,
    load_volume,
    manifest_digest,
    read_manifest,
    save_volume,
    split_dataset,
    write_dataset,
)
from .errors import ConfigError, DiffRegError, DomainError
from .grid import Volume, warp
from .metrics import dice
from .pipeline import Trainer, evaluate, load_checkpoint, register, seed_everything

log = logging.getLogger("diffreg")

DATA_ENV = "DIFFREG_DATA"


class UsageError(DiffRegError):
    """Bad command-line usage."""


def _data_dir(args) -> Path:
    path = args.data or os.environ.get(DATA_ENV)
    if not path:
        raise UsageError(f"no dataset given; pass --data or set {DATA_ENV}")
    return Path(path)


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "--set")
        key, value = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "max_steps", None) is not None:
        overrides["max_steps"] = args.max_steps
    return cfg.replace(**overrides) if overrides else cfg


def _split(args):
    manifest = read_manifest(_data_dir(args))
    pairs = load_pairs(manifest)
    train, test = split_dataset(pairs, args.train_fraction, seed=args.split_seed)
    return manifest, pairs, train, test


def _initial_dice(pairs) -> float:
    return float(np.mean([dice(p["moving_labels"], p["fixed_labels"], PHANTOM_CLASSES)["mean"] for p in pairs]))


def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    spec = PhantomSpec(extent=tuple(args.extent), amplitude=args.amplitude)
    write_dataset(out, args.pairs, spec, seed=args.seed)
    pairs = load_pairs(read_manifest(out))
    print(f"pairs={len(pairs)} initial_dice={_initial_dice(pairs):.6f} "
          f"manifest_sha256={manifest_digest(out / 'manifest.json')}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seed_everything(cfg.seed)
    _, _, train, _ = _split(args)
    trainer = Trainer(cfg, train, out_dir=args.out, resume=not args.restart)
    history = trainer.fit()
    last = history[-1] if history else {}
    print(f"steps={trainer.step} epochs={trainer.epoch} aborted={trainer.aborted_steps} "
          f"loss_total={last.get('loss_total', float('nan')):.6f} checkpoint={trainer.checkpoint_path}")
    return 0


def _load_image(path, frame):
    vol = load_volume(path, frame)
    return vol.batched(), vol.spacing


def cmd_register(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    fixed, spacing = _load_image(args.fixed, args.frame)
    moving, _ = _load_image(args.moving, args.frame)
    phi, warped = register(model, fixed, moving)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(Volume(phi[0], spacing), out / "phi")
    save_volume(Volume(warped[0], spacing), out / "warped")
    msg = f"phi={out / 'phi.raw'} warped={out / 'warped.raw'}"
    if args.fixed_labels and args.moving_labels:
        fixed_labels, _ = _load_image(args.fixed_labels, args.frame)
        moving_labels, _ = _load_image(args.moving_labels, args.frame)
        warped_labels = warp(moving_labels, phi, mode="nearest")
        save_volume(Volume(warped_labels[0], spacing, is_label=True), out / "warped_labels")
        classes = [int(c) for c in torch.unique(fixed_labels).tolist() if c != 0]
        before = dice(moving_labels, fixed_labels, classes)["mean"]
        after = dice(warped_labels, fixed_labels, classes)["mean"]
        msg += f" dice_before={before:.6f} dice_after={after:.6f}"
    print(msg)
    return 0


def cmd_evaluate(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    _, pairs, _, test = _split(args)
    chosen = pairs if args.all_pairs else test
    if not chosen:
        raise UsageError("the held-out split is empty; pass --all-pairs")
    rows = evaluate(model, chosen, PHANTOM_CLASSES, run_id=args.run_id, results_path=args.results,
                    include_union=args.union)
    for key in ("dice_mean", "folding_percent", "jacobian_sd"):
        print(f"{key}={np.mean([r[key] for r in rows]):.6f}", end=" ")
    print(f"pairs={len(rows)} results={args.results}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seed_everything(cfg.seed)
    _, _, train, test = _split(args)
    rows = run_ablation(cfg, train, test, args.variants, args.seeds, args.out, PHANTOM_CLASSES)
    for variant, metrics in aggregate(rows).items():
        means = " ".join(f"{m}={np.mean(v):.6f}" for m, v in metrics.items())
        print(f"{variant}: {means}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_gamma_sweep, plot_registration_panels, plot_variant_bars

    rows = read_summary(args.results)
    if not rows:
        raise DomainError(f"results file {args.results} is empty; nothing to plot")
    out = Path(args.out)
    variants = {r["variant"] for r in rows}
    has_bars = bool(variants & {"full", "no_fdg", "no_sdg"})
    has_sweep = any(v.startswith("gamma=") for v in variants)
    if not (has_bars or has_sweep):
        raise UsageError(f"results hold no known variants: {sorted(variants)}")
    written = []
    if has_bars:
        written.append(plot_variant_bars(rows, out / "variants.png"))
    if has_sweep:
        written.append(plot_gamma_sweep(rows, out / "gamma_sweep.png"))
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        _, pairs, _, test = _split(args)
        pair = (test or pairs)[0]
        phi, warped = register(model, pair["fixed"], pair["moving"])
        written.append(plot_registration_panels(pair["fixed"], pair["moving"], warped, phi, out / "panels.png"))
    print(" ".join(str(p) for p in written))
    return 0


def _add_data_args(p):
    p.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--split-seed", type=int, default=0)


def _add_config_args(p):
    p.add_argument("--config", help="JSON or YAML run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. loss.gamma=0")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffreg", description="Diffusion-guided deformable registration.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--extent", type=int, nargs="+", default=[64, 64])
    p.add_argument("--amplitude", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on the training split")
    _add_config_args(p)
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--restart", action="store_true", help="ignore an existing checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed-labels")
    p.add_argument("--moving-labels")
    p.add_argument("--frame", type=int, help="time point of 4D NIfTI inputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out pairs")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.add_argument("--results", required=True)
    p.add_argument("--run-id", default="eval")
    p.add_argument("--all-pairs", action="store_true")
    p.add_argument("--union", action="store_true", help="also score the union of all foreground classes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score ablation variants")
    _add_config_args(p)
    _add_data_args(p)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from ablation results")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="also draw registration panels for one held-out pair")
    _add_data_args(p)
    p.set_defaults(func=cmd_plot)
    return parser


def _kind(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, OSError):
        return "io"
    return "value"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for bad usage; here that is a user error
        return 1 if exc.code == 2 else int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DiffRegError, ValueError, OSError) as exc:
        print(f"error: {_kind(exc)}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: internal: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
