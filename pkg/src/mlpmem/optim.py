from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class OptimSettings:
    """AdamW with linear warmup then linear decay to zero."""

    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 50
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)


def make_optimizer(model: nn.Module, s: OptimSettings) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LambdaLR]:
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": s.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=s.lr,
        betas=s.betas,
    )

    def schedule(step: int) -> float:
        if step < s.warmup:
            return (step + 1) / s.warmup
        return max(0.0, (s.steps - step) / max(1, s.steps - s.warmup))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, schedule)
