"""AdamW + cosine-annealing training loop with deterministic seeding."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import AugmentPolicy, SegmentationDataset, batch_indices, collate
from .errors import TrainingError
from .metrics import combined_loss, dice_coefficient
from .model import Checkpoint, LAPFormer, model_to_checkpoint, read_checkpoint, load_state, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    base_lr: float = 1e-4
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"
    grad_clip: float | None = None
    seed: int = 0
    runs: int = 5
    input_size: tuple[int, int] = (352, 352)
    augment: bool = True
    checkpoint_dir: Path | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "adamw" or self.schedule != "cosine":
            raise ValueError("only optimizer=adamw with schedule=cosine is supported")


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr: float


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def split_decay(model: nn.Module):
    """(decay, no_decay) parameter-name lists. Biases and all normalisation
    scales/shifts (every parameter of rank <= 1) are exempt from decay."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim <= 1 else decay).append(name)
    return decay, no_decay


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = split_decay(model)
    params = dict(model.named_parameters())
    groups = [{"params": [params[n] for n in decay], "weight_decay": cfg.weight_decay},
              {"params": [params[n] for n in no_decay], "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.base_lr, betas=cfg.betas, eps=cfg.eps)


def enable_determinism() -> str:
    """Returns "bitwise" or, when the backend refuses, "statistical"."""
    try:
        torch.use_deterministic_algorithms(True)
    except Exception as e:  # pragma: no cover - backend specific
        log.warning("deterministic kernels unavailable (%s); runs are statistically reproducible only", e)
        return "statistical"
    return "bitwise"


def param_norm(model: nn.Module) -> float:
    with torch.no_grad():
        return float(torch.sqrt(sum((p.double() ** 2).sum() for p in model.parameters())))


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2 ** 63)


def train(model: LAPFormer, train_split, config: TrainConfig, resume_from=None,
          log_path=None) -> tuple[Checkpoint, list[EpochLog]]:
    """Train in place; returns the final checkpoint and per-epoch log rows.

    ``resume_from`` is a checkpoint written by a previous call with the same
    config; its sibling ``.optim`` file restores the optimizer.
    """
    items = list(train_split)
    if not items:
        raise ValueError("cannot train on an empty split")
    mode = enable_determinism()
    policy = AugmentPolicy(enabled=config.augment)
    dataset = train_split if isinstance(train_split, SegmentationDataset) else \
        SegmentationDataset(items, config.input_size, policy, config.seed)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total = config.epochs * steps_per_epoch
    opt = make_optimizer(model, config)
    start_epoch = 0
    if resume_from is not None:
        ckpt = read_checkpoint(resume_from)
        load_state(model, ckpt.params)
        opt.load_state_dict(torch.load(Path(str(resume_from) + ".optim"), weights_only=True))
        start_epoch = int(ckpt.metadata["epoch"])
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "a") if log_path else None
    history: list[EpochLog] = []
    t0 = time.perf_counter()
    model.train()
    try:
        for epoch in range(start_epoch, config.epochs):
            torch.manual_seed(_epoch_seed(config.seed, epoch))
            losses = []
            lr = config.base_lr
            for k, idx in enumerate(batch_indices(len(dataset), config.batch_size, True, config.seed, epoch)):
                step = epoch * steps_per_epoch + k
                lr = lr_at(step, total, config.base_lr)
                for g in opt.param_groups:
                    g["lr"] = lr
                batch = collate([dataset.get(i, epoch) for i in idx])
                loss = combined_loss(model(batch.images), batch.masks, validate=False)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss.item()} at epoch {epoch + 1} step {step}; "
                        f"batch ids {batch.ids}; parameter norm {param_norm(model):.6g}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if config.grad_clip:
                    nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                losses.append(loss.item())
                if log_file:
                    log_file.write(f"{epoch + 1} {step} {loss.item():.6f} {lr:.8e} "
                                   f"{time.perf_counter() - t0:.3f}\n")
                    log_file.flush()
            history.append(EpochLog(epoch + 1, float(np.mean(losses)), lr))
            log.info("epoch %d loss %.4f lr %.3g", epoch + 1, history[-1].mean_loss, lr)
            if ckpt_dir:
                meta = {"seed": config.seed, "epoch": epoch + 1, "determinism": mode}
                for name in (f"epoch_{epoch + 1:03d}.ckpt", "last.ckpt"):
                    save_checkpoint(model, ckpt_dir / name, meta)
                    torch.save(opt.state_dict(), ckpt_dir / (name + ".optim"))
    finally:
        if log_file:
            log_file.close()
    model.eval()
    final = model_to_checkpoint(model, {"seed": config.seed, "epoch": config.epochs,
                                        "determinism": mode})
    return final, history


def mean_dice(model: nn.Module, samples) -> float:
    model.eval()
    with torch.no_grad():
        scores = []
        for s in samples:
            pred = torch.sigmoid(model(s.image[None]))[0, 0] > 0.5
            scores.append(dice_coefficient(pred, s.mask[0].bool()))
    return float(np.mean(scores))


def overfit_check(model: LAPFormer, tiny_set, steps: int = 200, lr: float = 1e-4,
                  seed: int = 0) -> float:
    """Full-batch training on at most 8 samples, no augmentation; returns the
    eval-mode mean Dice on those same samples."""
    samples = list(tiny_set)
    if not samples:
        raise ValueError("overfit_check needs at least one sample")
    if len(samples) > 8:
        raise ValueError(f"overfit_check takes at most 8 samples, got {len(samples)}")
    if steps > 0:
        enable_determinism()
        torch.manual_seed(seed)
        cfg = TrainConfig(epochs=1, batch_size=len(samples), base_lr=lr, seed=seed, augment=False)
        opt = make_optimizer(model, cfg)
        batch = collate(samples)
        model.train()
        for step in range(steps):
            for g in opt.param_groups:
                g["lr"] = lr_at(step, steps, lr)
            loss = combined_loss(model(batch.images), batch.masks, validate=False)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}; batch ids {batch.ids}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return mean_dice(model, samples)
