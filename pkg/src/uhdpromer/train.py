from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PairSampler, find_pairs, synthetic_pairs
from .losses import LossConfig, loss_terms
from .metrics import psnr
from .model import ModelConfig, UHDPromer, build_model

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "lr", "loss", "loss_main", "loss_sr"]


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 2
    patch_size: int = 64
    lr_init: float = 5e-4
    lr_min: float = 1e-7
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    seed: int = 0
    data_root: str | None = None
    overfit_synthetic: bool = False
    checkpoint_interval: int = 500
    flips: bool = True
    workers: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1 (got {self.total_steps})")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1 (got {self.batch_size})")
        if not 0 <= self.lr_min <= self.lr_init:
            raise ValueError(f"need 0 <= lr_min <= lr_init (got {self.lr_min}, {self.lr_init})")

    @classmethod
    def overfit_preset(cls, **overrides) -> "TrainConfig":
        """Defaults for memorizing the two synthetic pairs in ~500 steps.

        The default lr (5e-4) is too small for a 500-step schedule: the SR
        head, which has no identity skip, stays on its initial plateau.
        """
        return cls(**{**OVERFIT_DEFAULTS, **overrides})


OVERFIT_DEFAULTS = dict(overfit_synthetic=True, total_steps=500, batch_size=2, patch_size=64,
                        lr_init=5e-3, flips=False)


class NonFiniteLossError(FloatingPointError):
    pass


def cosine_lr(step: int, total_steps: int, lr_init: float = 5e-4, lr_min: float = 1e-7) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr_init, betas=cfg.betas,
                             weight_decay=cfg.weight_decay, eps=1e-8)


def train_step(model: UHDPromer, batch, optimizer: torch.optim.Optimizer, lr: float,
               loss_cfg: LossConfig | None = None, step: int | None = None) -> dict:
    """One AdamW update on ``batch = (degraded, clean)``; returns the loss
    components measured before the update."""
    loss_cfg = loss_cfg or LossConfig()
    degraded, clean = batch
    for g in optimizer.param_groups:
        g["lr"] = lr
    model.train()
    optimizer.zero_grad(set_to_none=True)
    restored, sr = model(degraded)
    loss, main, sr_loss = loss_terms(restored, sr, clean, loss_cfg, model.config.variant)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss at step {step}: lr={lr:g} loss={loss.item()} "
                                 f"main={main.item()} sr={sr_loss.item()}")
    loss.backward()
    optimizer.step()
    return {"loss": loss.item(), "loss_main": main.item(), "loss_sr": sr_loss.item()}


@dataclass
class TrainReport:
    steps_run: int
    final_step: int
    initial_loss: float | None
    final_loss: float | None
    train_psnr: float
    log_path: Path
    checkpoint: Path
    history: list = field(default_factory=list)

    @property
    def loss_reduction(self) -> float:
        if not self.initial_loss:
            return math.nan
        return 1.0 - self.final_loss / self.initial_loss


@torch.no_grad()
def training_psnr(model: UHDPromer, records) -> float:
    """Mean PSNR of the restored full images against their ground truth."""
    model.eval()
    vals = []
    for rec in records:
        d, g = rec.arrays()
        restored, _ = model(torch.from_numpy(d)[None])
        vals.append(psnr(restored.clamp(0, 1), torch.from_numpy(g)[None]))
    return float(np.mean(vals))


def load_records(cfg: TrainConfig):
    if cfg.overfit_synthetic:
        return synthetic_pairs(n=2, size=cfg.patch_size, seed=cfg.seed)
    if not cfg.data_root:
        raise FileNotFoundError("no dataset: set data_root (expects <root>/input and <root>/gt) "
                                "or use the synthetic overfit mode")
    return find_pairs(cfg.data_root)


def fit(model_config: ModelConfig, train_config: TrainConfig, out_dir, loss_config: LossConfig | None = None,
        resume=None, records=None, stop_at: int | None = None) -> TrainReport:
    """Train with a cosine schedule, logging every step to ``train_log.csv``
    and checkpointing to ``ckpt_step{N:06d}.ckpt`` plus ``last.ckpt``.

    ``resume`` is a checkpoint path; the schedule and data order continue
    from its step. ``stop_at`` ends the run early (the schedule still spans
    ``total_steps``).
    """
    loss_config = loss_config or LossConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = records if records is not None else load_records(train_config)
    sampler = PairSampler(records, train_config.batch_size, train_config.patch_size,
                          seed=train_config.seed, flips=train_config.flips, workers=train_config.workers)

    if resume is not None:
        ck = load_checkpoint(resume, expected_config=model_config)
        model, start = ck.model, ck.step
        optimizer = make_optimizer(model, train_config)
        if ck.optimizer_state is not None:
            optimizer.load_state_dict(ck.optimizer_state)
    else:
        model, start = build_model(model_config), 0
        optimizer = make_optimizer(model, train_config)

    end = train_config.total_steps if stop_at is None else min(stop_at, train_config.total_steps)
    log_path = out / "train_log.csv"
    fresh = resume is None or not log_path.exists()
    history = []
    last_ckpt = out / "last.ckpt"
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        wr = csv.writer(fh)
        if fresh:
            wr.writerow(LOG_HEADER)
        for step in range(start, end):
            lr = cosine_lr(step, train_config.total_steps, train_config.lr_init, train_config.lr_min)
            parts = train_step(model, sampler.batch(step), optimizer, lr, loss_config, step)
            row = (step, lr, parts["loss"], parts["loss_main"], parts["loss_sr"])
            history.append(row)
            wr.writerow([step, repr(lr), repr(parts["loss"]), repr(parts["loss_main"]), repr(parts["loss_sr"])])
            done = step + 1
            if train_config.checkpoint_interval and done % train_config.checkpoint_interval == 0:
                save_checkpoint(model, optimizer, done, out / f"ckpt_step{done:06d}.ckpt",
                                extra={"train_config": _jsonable(train_config)})
            if step % 100 == 0:
                log.info("step %d lr %.3g loss %.5f", step, lr, parts["loss"])
    save_checkpoint(model, optimizer, end, last_ckpt, extra={"train_config": _jsonable(train_config)})

    return TrainReport(
        steps_run=end - start,
        final_step=end,
        initial_loss=history[0][2] if history else None,
        final_loss=history[-1][2] if history else None,
        train_psnr=training_psnr(model, records),
        log_path=log_path,
        checkpoint=last_ckpt,
        history=history,
    )


def _jsonable(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["betas"] = list(d["betas"])
    return d
