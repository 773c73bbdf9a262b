"""Central-difference gradient checking against autograd."""
from __future__ import annotations

import numpy as np
import torch


class NonReproducibleLoss(RuntimeError):
    pass


def finite_diff_grad_check(loss_fn, param: torch.Tensor, epsilon: float = 1e-5, coords=None,
                           n_coords: int = 6, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` takes no arguments and returns a scalar tensor that depends on
    ``param``. ``coords`` are flat indices into ``param``; ``"top"`` picks the
    ``n_coords`` entries with the largest autograd magnitude (where a relative
    error is well conditioned); when omitted, ``n_coords`` are sampled with
    ``seed``. Run in float64 for meaningful results.
    """
    with torch.no_grad():
        a, b = float(loss_fn()), float(loss_fn())
    if a != b:
        raise NonReproducibleLoss("loss not reproducible between two evaluations")

    if param.grad is not None:
        param.grad = None
    needs = param.requires_grad
    param.requires_grad_(True)
    try:
        loss = loss_fn()
        (grad,) = torch.autograd.grad(loss, param)
    finally:
        param.requires_grad_(needs)
    grad = grad.detach().reshape(-1)

    if isinstance(coords, str):
        if coords != "top":
            raise ValueError(f"unknown coordinate selector {coords!r}")
        coords = torch.argsort(grad.abs(), descending=True)[:n_coords].numpy()
    elif coords is None:
        rng = np.random.default_rng(seed)
        coords = rng.choice(param.numel(), size=min(n_coords, param.numel()), replace=False)
    flat = param.data.view(-1)
    worst = 0.0
    with torch.no_grad():
        for c in np.atleast_1d(coords):
            c = int(c)
            orig = flat[c].item()
            flat[c] = orig + epsilon
            up = float(loss_fn())
            flat[c] = orig - epsilon
            down = float(loss_fn())
            flat[c] = orig
            numeric = (up - down) / (2 * epsilon)
            err = abs(grad[c].item() - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
