"""AdamW with frozen-parameter filtering, plus the warmup/cosine schedule."""
from __future__ import annotations

import math

import torch


class AdamW(torch.optim.AdamW):
    """``torch.optim.AdamW`` that refuses non-positive learning rates and
    silently drops parameters with ``requires_grad=False``."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        params = list(params)
        if params and isinstance(params[0], dict):
            groups = [dict(g, params=[p for p in g["params"] if p.requires_grad]) for g in params]
            params = [g for g in groups if g["params"]]
        else:
            params = [p for p in params if p.requires_grad]
        # foreach=False keeps the update a fixed sequence of per-tensor ops.
        super().__init__(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, foreach=False)


def adamw_step(optimizer: AdamW, grads=None, lr: float | None = None):
    """One update. ``grads`` (same order as the optimizer's params) overrides ``.grad``."""
    if lr is not None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        for g in optimizer.param_groups:
            g["lr"] = lr
    if grads is not None:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        for p, g in zip(params, grads):
            p.grad = g
    optimizer.step()


def warmup_cosine(step: int, base_lr: float, warmup: int, total: int, min_ratio: float = 0.0) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_ratio * base_lr``."""
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))
