"""One training stage (adapt or finetune) with exact parameter freezing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch

from ..exceptions import ConfigurationError, InvariantViolationError, TrainingAbortError
from ..io.checkpoint import state_digests
from ..losses import LossWeights, det_loss, seg_loss, total_loss
from ..model import is_adapter_param, is_text_encoder_param
from ..tasks import DET, DRIV, SEM, TASKS
from .schedules import BatchComposer, collate

log = logging.getLogger(__name__)

ADAPT = "adapt"
FINETUNE = "finetune"
_STAGE_CODES = {ADAPT: 1, FINETUNE: 2}


def adapt_trainable(name):
    return is_adapter_param(name)


def finetune_trainable(name):
    return not is_text_encoder_param(name)


@dataclass(frozen=True)
class StageConfig:
    stage: str = FINETUNE
    epochs: int = 1
    learning_rate: Optional[float] = None
    weight_decay: float = 1e-4
    warmup_iters: int = 1000
    warmup_factor: float = 0.01
    scale_warmup: bool = True
    batch_size: int = 8
    grad_clip: Optional[float] = 1.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    trainable: Optional[Callable[[str], bool]] = None

    def __post_init__(self):
        if self.stage not in _STAGE_CODES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", 2.5e-4 if self.stage == ADAPT else 2.5e-5)
        if not 0.0 <= self.warmup_factor <= 1.0:
            raise ConfigurationError("warmup_factor must lie in [0, 1]")

    def is_trainable(self, name):
        if is_text_encoder_param(name):
            return False
        if self.trainable is not None:
            return bool(self.trainable(name))
        return adapt_trainable(name) if self.stage == ADAPT else finetune_trainable(name)

    def to_dict(self):
        return {
            "stage": self.stage, "epochs": self.epochs, "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay, "warmup_iters": self.warmup_iters,
            "warmup_factor": self.warmup_factor, "scale_warmup": self.scale_warmup,
            "batch_size": self.batch_size, "grad_clip": self.grad_clip,
            "loss_weights": self.loss_weights.as_dict(),
        }


@dataclass
class FreezeSpec:
    frozen_names: set
    digest_before: dict
    digest_after: dict

    def drifted(self):
        return sorted(n for n in self.frozen_names if self.digest_before[n] != self.digest_after.get(n))

    def changed(self, names):
        return sorted(n for n in names if self.digest_before.get(n) != self.digest_after.get(n))


class StageResult(NamedTuple):
    model: torch.nn.Module
    log: list
    freeze: FreezeSpec


def warmup_lr(step, base_lr, warmup_iters, warmup_factor):
    """``base_lr * (f + (1 - f) * min(1, step / warmup_iters))``."""
    if warmup_iters <= 0:
        return base_lr
    return base_lr * (warmup_factor + (1.0 - warmup_factor) * min(1.0, step / warmup_iters))


def effective_warmup(cfg: StageConfig, total_steps):
    if not cfg.scale_warmup:
        return cfg.warmup_iters
    return min(cfg.warmup_iters, max(1, total_steps // 10))


def steps_per_epoch(num_images, batch_size):
    return math.ceil(num_images / batch_size)


def stage_rng(seed, stage):
    return np.random.default_rng([int(seed), _STAGE_CODES[stage]])


def batch_losses(model, dataset, batch, weights: LossWeights, dtype=torch.float32):
    """Per-task masked losses and their weighted total for one composed batch."""
    images, masks, boxes = collate(dataset, batch, dtype=dtype)
    pyr = model.features(images)
    losses = {}
    for j, task in enumerate(TASKS):
        if task not in model.tasks:
            continue
        rows = np.flatnonzero(batch.loss_mask[:, j])
        if rows.size == 0:
            continue
        idx = torch.as_tensor(rows)
        sub = type(pyr)(*(p[idx] for p in pyr))
        pred = model.forward_task(sub, task)
        if task == DET:
            losses[task] = det_loss(pred, [boxes[r] for r in rows], images.shape[-2:])
        else:
            losses[task] = seg_loss(pred, masks[task][idx])
    zero = images.new_zeros(())
    total = total_loss(losses.get(DET, zero), losses.get(SEM, zero), losses.get(DRIV, zero), weights)
    return losses, total


def run_stage(model, dataset, cfg: StageConfig, schedule, seed=0, step_offset=0, log_path=None) -> StageResult:
    """Optimize ``cfg.trainable`` parameters for ``cfg.epochs`` epochs.

    Frozen tensors are verified bit-identical at the end; a drift raises
    :class:`InvariantViolationError`.
    """
    names = [n for n, _ in model.named_parameters()]
    trainable = [n for n in names if cfg.is_trainable(n)]
    if cfg.stage == ADAPT:
        outside = [n for n in trainable if not is_adapter_param(n)]
        if outside:
            raise ConfigurationError(f"adapt stage may only train adapter tensors, got {outside[:3]}")
    frozen = set(names) - set(trainable)
    before = state_digests(model)
    history = []
    total_steps = cfg.epochs * steps_per_epoch(len(dataset), cfg.batch_size)
    if total_steps == 0:
        return StageResult(model, history, FreezeSpec(frozen, before, dict(before)))

    params = dict(model.named_parameters())
    saved_flags = {n: p.requires_grad for n, p in params.items()}
    for n, p in params.items():
        p.requires_grad_(n in trainable)
    opt = torch.optim.AdamW([params[n] for n in trainable], lr=cfg.learning_rate, betas=(0.9, 0.999),
                            eps=1e-8, weight_decay=cfg.weight_decay)
    warm = effective_warmup(cfg, total_steps)
    composer = BatchComposer(dataset, schedule, cfg.batch_size, stage_rng(seed, cfg.stage))
    dtype = next(model.parameters()).dtype
    model.train()
    try:
        for step in range(total_steps):
            lr = warmup_lr(step, cfg.learning_rate, warm, cfg.warmup_factor)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = next(composer)
            try:
                losses, total = batch_losses(model, dataset, batch, cfg.loss_weights, dtype)
            except TrainingAbortError as exc:
                raise TrainingAbortError(f"{cfg.stage} stage, step {step}: {exc}") from exc
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_([params[n] for n in trainable], cfg.grad_clip)
            opt.step()
            record = {
                "step": step_offset + step,
                "stage": cfg.stage,
                "lr": lr,
                "task": batch.task,
                "loss_det": _scalar(losses.get(DET)),
                "loss_sem": _scalar(losses.get(SEM)),
                "loss_driv": _scalar(losses.get(DRIV)),
                "total": _scalar(total),
            }
            history.append(record)
            if log_path is not None:
                _append_jsonl(log_path, record)
    finally:
        for n, p in params.items():
            p.requires_grad_(saved_flags[n])
    model.eval()
    after = state_digests(model)
    freeze = FreezeSpec(frozen, before, after)
    drift = freeze.drifted()
    if drift:
        raise InvariantViolationError(f"frozen tensors changed during {cfg.stage}: {drift[:5]}")
    log.info("%s stage: %d steps, final loss %.4f", cfg.stage, total_steps, history[-1]["total"])
    return StageResult(model, history, freeze)


def _scalar(t):
    return None if t is None else float(t.detach())


def _append_jsonl(path, record):
    import json

    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def with_epochs(cfg: StageConfig, epochs):
    return replace(cfg, epochs=epochs)
