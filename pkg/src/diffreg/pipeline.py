"""Training, inference, checkpointing and evaluation."""
from __future__ import annotations

import csv
import logging
import os
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig
from .diffusion import NoiseSchedule, diffusion_loss, make_linear_schedule, sample_perturbed
from .errors import ConfigError, DomainError
from .grid import smoothness_penalty, warp
from .losses import score_ncc_loss, total_loss
from .metrics import append_results, evaluate_pair
from .network import RegistrationNet

__all__ = [
    "CHECKPOINT_FORMAT",
    "StepResult",
    "seed_everything",
    "build_model",
    "build_optimizer",
    "schedule_from_config",
    "train_step",
    "register",
    "Trainer",
    "save_checkpoint",
    "load_checkpoint",
    "evaluate",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "diffreg-checkpoint/1"
TRAIN_LOG_FIELDS = ("step", "epoch", "t", "loss_total", "l_diffusion", "l_score_ncc", "smooth")


@dataclass(frozen=True)
class StepResult:
    loss_total: float
    l_diffusion: float
    l_score_ncc: float
    smooth: float


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def build_model(cfg: TrainConfig) -> RegistrationNet:
    """Fresh network with parameters drawn from ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return RegistrationNet(cfg.backbone)


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def schedule_from_config(cfg: TrainConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_linear_schedule(s.beta_start, s.beta_end, s.num_steps)


def train_step(model: RegistrationNet, optimizer, fixed: torch.Tensor, moving: torch.Tensor, t, eps: torch.Tensor,
               cfg: TrainConfig, schedule: NoiseSchedule) -> StepResult:
    """One joint update of encoder and both decoders.

    Raises :class:`DomainError` without touching the parameters when the loss
    or its gradient is not finite.
    """
    model.train()
    t = torch.as_tensor(t).reshape(-1)
    x_t = sample_perturbed(fixed, t, eps, schedule)
    out = model(fixed, moving, x_t, t)
    warped = warp(moving, out.phi)
    l_diff = diffusion_loss(out.score, eps)
    l_ncc = score_ncc_loss(warped, fixed, out.score, cfg.loss)
    smooth = smoothness_penalty(out.phi)
    loss = total_loss(l_diff, l_ncc, smooth, cfg.loss)

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    if not torch.isfinite(grad_norm):
        optimizer.zero_grad(set_to_none=True)
        raise DomainError(f"non-finite gradient norm {float(grad_norm)}")
    optimizer.step()
    return StepResult(loss.item(), l_diff.item(), l_ncc.item(), smooth.item())


@torch.no_grad()
def register(model: RegistrationNet, fixed: torch.Tensor, moving: torch.Tensor):
    """Deterministic registration: the clean fixed image replaces the noisy
    input and the time step is 0. Returns ``(phi, warped)``."""
    model.eval()
    t = torch.zeros(fixed.shape[0], dtype=torch.long)
    out = model(fixed, moving, fixed, t)
    return out.phi, warp(moving, out.phi)


def save_checkpoint(path, model, optimizer, cfg: TrainConfig, epoch: int, step: int,
                    rng_state=None, history=None, batch_index: int = 0) -> None:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "batch_index": batch_index,
        "rng_state": rng_state,
        "history": list(history or []),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(model, optimizer, payload)`` restored from ``path``."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format in {path}", "checkpoint.format")
    cfg = TrainConfig.from_dict(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    optimizer = build_optimizer(model, cfg)
    if payload.get("optimizer") is not None:
        optimizer.load_state_dict(payload["optimizer"])
    payload["config"] = cfg
    return model, optimizer, payload


class Trainer:
    """Owns one model and optimiser and runs seeded epochs over a pair list.

    Time steps and noise come from a private generator whose state is saved in
    checkpoints, so a resumed run continues the exact random stream.
    """

    def __init__(self, cfg: TrainConfig, pairs: Sequence[dict], out_dir=None, resume: bool = True):
        if not pairs:
            raise DomainError("no training pairs")
        for p in pairs:
            cfg.backbone.check_extent(p["fixed"].shape[2:])
        self.cfg = cfg
        self.pairs = list(pairs)
        self.schedule = schedule_from_config(cfg)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = build_model(cfg)
        self.optimizer = build_optimizer(self.model, cfg)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.epoch = 0
        self.step = 0
        self.batch_index = 0
        self.history: list[dict] = []
        self.aborted_steps = 0
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if resume and self.checkpoint_path.exists():
                self._resume()

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / "checkpoint.pt"

    @property
    def log_path(self) -> Path:
        return self.out_dir / "train_log.csv"

    def _resume(self):
        model, optimizer, payload = load_checkpoint(self.checkpoint_path)
        if _resumable(payload["config"]) != _resumable(self.cfg):
            raise ConfigError("checkpoint config differs from the requested config", "checkpoint.config")
        self.model, self.optimizer = model, optimizer
        self.epoch, self.step = payload["epoch"], payload["step"]
        self.batch_index = payload.get("batch_index", 0)
        self.history = payload["history"]
        self.generator.set_state(payload["rng_state"])
        log.info("resumed from %s at epoch %d step %d", self.checkpoint_path, self.epoch, self.step)

    def save(self):
        if self.out_dir is None:
            return
        save_checkpoint(self.checkpoint_path, self.model, self.optimizer, self.cfg, self.epoch, self.step,
                        self.generator.get_state(), self.history, self.batch_index)

    def _log_row(self, row: dict):
        if self.out_dir is None:
            return
        new = not self.log_path.exists()
        with self.log_path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_FIELDS)
            if new:
                writer.writeheader()
            writer.writerow(row)

    def _batches(self, epoch: int):
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.pairs))
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            chunk = [self.pairs[i] for i in order[start:start + bs]]
            yield (torch.cat([p["fixed"] for p in chunk]), torch.cat([p["moving"] for p in chunk]))

    def fit(self, callback=None) -> list[dict]:
        """Train until ``cfg.epochs`` (or ``cfg.max_steps``) is reached.

        ``callback(trainer, row)`` runs after every step; returning ``False``
        stops training early (after a checkpoint).
        """
        cfg = self.cfg
        T = self.schedule.num_steps
        while self.epoch < cfg.epochs and not self._done():
            for index, (fixed, moving) in enumerate(self._batches(self.epoch)):
                if index < self.batch_index:
                    continue
                if self._done():
                    break
                self.batch_index = index + 1
                t = torch.randint(1, T + 1, (fixed.shape[0],), generator=self.generator)
                eps = torch.randn(fixed.shape, generator=self.generator, dtype=fixed.dtype)
                try:
                    res = train_step(self.model, self.optimizer, fixed, moving, t, eps, cfg, self.schedule)
                except DomainError as exc:
                    self.aborted_steps += 1
                    log.warning("step %d aborted: %s", self.step, exc)
                    self.step += 1
                    continue
                self.step += 1
                row = {"step": self.step, "epoch": self.epoch, "t": int(t[0]), **asdict(res)}
                self.history.append(row)
                self._log_row(row)
                if callback is not None and callback(self, row) is False:
                    self.save()
                    return self.history
            else:
                self.epoch += 1
                self.batch_index = 0
                if self.epoch % cfg.checkpoint_every == 0 or self.epoch == cfg.epochs:
                    self.save()
        self.save()
        return self.history

    def _done(self) -> bool:
        return self.cfg.max_steps > 0 and self.step >= self.cfg.max_steps


def _resumable(cfg: TrainConfig) -> dict:
    # run-length fields may grow between a run and its resumption
    d = cfg.to_dict()
    for key in ("epochs", "max_steps", "checkpoint_every"):
        d.pop(key)
    return d


def evaluate(model: RegistrationNet, pairs: Sequence[dict], class_ids: Sequence[int], run_id: str = "run",
             results_path=None, include_union: bool = False) -> list[dict]:
    """Register every pair, score the warped labels against the fixed labels."""
    rows = []
    for p in pairs:
        phi, _ = register(model, p["fixed"], p["moving"])
        warped_labels = warp(p["moving_labels"], phi, mode="nearest")
        res = evaluate_pair(phi, warped_labels, p["fixed_labels"], class_ids, include_union)
        rows.append({"run_id": run_id, "pair_id": p["id"], **res})
        if results_path is not None:
            append_results(results_path, run_id, p["id"], res)
    return rows
