"""Finite-difference suite over the trainable paths of the full model (float64)."""
from __future__ import annotations

import numpy as np
import torch

from .nn.gradcheck import finite_diff_grad_check
from .trainer import Model, make_config


def _probe(dim, seed):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(dim))


def gradcheck_suite(seed: int = 0, epsilon: float = 1e-5, n_coords: int = 4, labels=("red car", "dog")) -> dict:
    """Max relative error per component: LLM prefix, prompt transformer, temporal attention, proj_spatial."""
    cfg = make_config({"seed": seed, "temporal.mode": "eval_mean"})
    model = Model(cfg).double()
    model.set_swa(False)  # eval_mean: deterministic alpha = lambda / 2
    le, ve = model.label_encoder, model.video_encoder
    r_t = _probe(model.backbones.cfg.joint_dim, seed)
    rng = np.random.default_rng(seed)
    g, c = model.backbones.cfg.grid, model.backbones.cfg.patch_channels
    frames = torch.from_numpy(rng.standard_normal((2, cfg["video.frames_per_clip"], g, g, c)))
    # Nudge the zero-initialized fusion so gradients through it are not degenerate.
    with torch.no_grad():
        for blk in ve.blocks:
            blk.proj_spatial.weight.add_(0.05 * torch.from_numpy(rng.standard_normal(blk.proj_spatial.weight.shape)))

    def label_loss():
        return (le.encode(list(labels)) @ r_t).sum()

    def video_loss():
        return (ve(frames) @ r_t).sum()

    checks = {
        "llm_prefix": (label_loss, le.prefix_bank.prefixes),
        "prompt_transformer": (label_loss, le.prompt_transformer.blocks[0].fc1.weight),
        "temporal_attention": (video_loss, ve.blocks[0].temporal_attention.attn.qkv.weight),
        "proj_spatial": (video_loss, ve.blocks[-1].proj_spatial.weight),
    }
    return {name: finite_diff_grad_check(fn, p, epsilon, coords="top", n_coords=n_coords)
            for name, (fn, p) in checks.items()}
