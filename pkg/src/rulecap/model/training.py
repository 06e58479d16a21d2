"""Optimization: AdamW with a linear learning-rate schedule."""
from __future__ import annotations

import logging
import math
from typing import Iterable

import torch

from ..errors import TrainingError
from .transformer import Batch, RuleCapModel

log = logging.getLogger(__name__)


def make_optimizer(model: RuleCapModel, lr: float = 5e-4, weight_decay: float = 0.01, total_steps: int = 1000,
                   warmup_steps: int = 0, final_lr_fraction: float = 0.0):
    """AdamW plus a linear warmup / linear decay schedule.

    Biases, LayerNorm gains and prefixes are excluded from weight decay.
    """
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim < 2 or name.startswith("prefixes") else decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}], lr=lr
    )

    def factor(step: int) -> float:
        if warmup_steps and step < warmup_steps:
            return (step + 1) / warmup_steps
        span = max(1, total_steps - warmup_steps)
        progress = min(1.0, (step - warmup_steps) / span)
        return 1.0 - (1.0 - final_lr_fraction) * progress

    sched = torch.optim.lr_scheduler.LambdaLR(opt, factor)
    return opt, sched


def train_step(batch: Batch, model: RuleCapModel, optimizer, scheduler=None, batch_id=None,
               clip_norm: float | None = 1.0) -> float:
    model.train()
    loss = model.loss(batch)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} on batch {batch_id}", batch_id=batch_id)
    optimizer.zero_grad()
    loss.backward()
    if clip_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return value


def fit(model: RuleCapModel, batches_per_epoch, epochs: int, lr: float = 5e-4, weight_decay: float = 0.01,
        warmup_steps: int = 0, clip_norm: float | None = 1.0) -> list[float]:
    """Train for ``epochs`` passes; ``batches_per_epoch(epoch)`` yields batches.

    Returns the mean loss of every epoch.
    """
    first = list(batches_per_epoch(0))
    total_steps = epochs * len(first)
    opt, sched = make_optimizer(model, lr, weight_decay, total_steps, warmup_steps)
    history = []
    step = 0
    for epoch in range(epochs):
        batches: Iterable[Batch] = first if epoch == 0 else batches_per_epoch(epoch)
        losses = []
        for batch in batches:
            losses.append(train_step(batch, model, opt, sched, batch_id=(epoch, step), clip_norm=clip_norm))
            step += 1
        history.append(sum(losses) / max(1, len(losses)))
        log.info("epoch %d loss %.4f", epoch + 1, history[-1])
    return history
