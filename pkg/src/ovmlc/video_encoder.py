"""Video encoder: frozen per-frame backbone plus a trainable parallel temporal branch.

The branch taps the last ``T`` backbone layers. Each temporal block fuses the
tapped patch tokens into the branch stream through a zero-initialized
projection, runs temporal attention per spatial location (with the TMP token
appended to every temporal sequence), then spatial attention per frame through
a copy of the tapped backbone layer whose weights are stochastically
interpolated with their frozen originals.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .backbones import ToyVisionBackbone
from .nn.layers import AttentionLayer, Linear, SeededModule

SWA_MODES = ("train_stochastic", "eval_mean", "eval_finetuned")
# "tokens": mean over {TMP, CLS_1..CLS_F}; "balanced": TMP and the frame-mean CLS weighted equally
POOLING = ("tokens", "balanced")


@dataclass
class SWAConfig:
    lam: float = 0.5
    mode: str = "train_stochastic"
    anchor_l2: float = 1e-6
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.mode not in SWA_MODES:
            raise ValueError(f"unknown SWA mode {self.mode!r}")


def sample_alpha(cfg: SWAConfig, rng: np.random.Generator) -> float:
    if not cfg.enabled or cfg.mode == "eval_finetuned":
        return 1.0
    if cfg.mode == "eval_mean":
        return cfg.lam / 2
    return float(rng.uniform(0.0, cfg.lam))


def swa_effective_weights(finetuned: dict, frozen: dict, cfg: SWAConfig, rng: np.random.Generator):
    """Interpolated weights ``alpha * ft + (1 - alpha) * frozen`` and the alpha used."""
    if set(finetuned) != set(frozen):
        raise ValueError("finetuned and frozen parameter sets differ")
    alpha = sample_alpha(cfg, rng)
    return _interpolate(finetuned, frozen, alpha), alpha


def _interpolate(finetuned, frozen, alpha):
    if alpha == 0.0:
        return dict(frozen)
    if alpha == 1.0:
        return dict(finetuned)
    out = {}
    for n, p in finetuned.items():
        f = frozen[n]
        if p.shape != f.shape:
            raise ValueError(f"shape mismatch for {n}")
        out[n] = alpha * p + (1.0 - alpha) * f
    return out


class SWALayer(nn.Module):
    """Trainable copy of a backbone layer with an immutable frozen snapshot."""

    def __init__(self, layer: nn.Module):
        super().__init__()
        self.finetuned = copy.deepcopy(layer)
        self.names = [n for n, _ in self.finetuned.named_parameters()]
        for n, p in self.finetuned.named_parameters():
            p.requires_grad_(True)
            self.register_buffer("frozen__" + n.replace(".", "__"), p.detach().clone())

    def frozen(self) -> dict[str, torch.Tensor]:
        return {n: getattr(self, "frozen__" + n.replace(".", "__")) for n in self.names}

    def forward(self, x, alpha: float):
        if alpha == 1.0:
            return self.finetuned(x)
        params = _interpolate(dict(self.finetuned.named_parameters()), self.frozen(), alpha)
        return functional_call(self.finetuned, params, (x,))

    def anchor_distance(self) -> torch.Tensor:
        frozen = self.frozen()
        return sum(((p - frozen[n]) ** 2).sum() for n, p in self.finetuned.named_parameters())


def init_tmp(cls_tokens: torch.Tensor) -> torch.Tensor:
    """Mean over the frame axis (second to last) of per-frame CLS tokens."""
    if cls_tokens.shape[-2] < 1:
        raise ValueError("need at least one frame")
    return cls_tokens.mean(dim=-2)


class TemporalBlock(SeededModule):
    def __init__(self, backbone_layer: nn.Module, dim: int, n_heads: int, seed: int, index: int,
                 final: bool = False):
        name = f"temporal.blocks.{index}"
        super().__init__(seed, name)
        self.index = index
        self.proj_spatial = Linear(dim, dim, seed, f"{name}.proj_spatial", zero=True)
        self.temporal_attention = AttentionLayer(dim, n_heads, seed, f"{name}.temporal_attention")
        # Only TMP leaves the branch and it is final after temporal attention, so the
        # last block's spatial layer could never influence the output.
        self.spatial = None if final else SWALayer(backbone_layer)

    def forward(self, x, tmp, v_s, alpha: float, temporal_attention=True):
        """``x``, ``v_s``: (B, F, P, d); ``tmp``: (B, d). Returns updated (x, tmp)."""
        b, f, p, d = x.shape
        x = x + self.proj_spatial(v_s)
        if temporal_attention:
            seq = torch.cat([x.transpose(1, 2), tmp[:, None, None, :].expand(b, p, 1, d)], dim=2)
            seq = self.temporal_attention(seq)
            x = seq[:, :, :f].transpose(1, 2)
            tmp = seq[:, :, f].mean(dim=1)
        if self.spatial is not None:
            x = self.spatial(x.reshape(b * f, p, d), alpha).reshape(b, f, p, d)
        return x, tmp


def sample_frames(n_frames: int, frames_per_clip: int, clips: int = 1, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Frame indices of shape (clips, frames_per_clip), uniformly spaced and ordered.

    Train mode draws one clip with a random phase; eval tiles ``clips`` phases
    evenly. Videos shorter than a clip repeat frames.
    """
    if n_frames < 1:
        raise ValueError("video has no frames")
    stride = n_frames / frames_per_clip
    base = np.arange(frames_per_clip)
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        offsets = [rng.uniform(0.0, 1.0)]
    elif mode == "eval":
        offsets = [(c + 0.5) / clips for c in range(clips)]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    idx = np.stack([np.floor((base + o) * stride) for o in offsets]).astype(np.int64)
    return np.minimum(idx, n_frames - 1)


class VideoEncoder(SeededModule):
    """Maps frame clips to unit-norm joint-space embeddings."""

    def __init__(self, backbone: ToyVisionBackbone, blocks: int = 4, swa: SWAConfig | None = None,
                 max_frames: int = 32, seed: int = 0, disable_temporal_attention: bool = False,
                 pooling: str = "tokens"):
        super().__init__(seed, "temporal")
        object.__setattr__(self, "backbone", backbone)
        cfg = backbone.cfg
        if not 0 <= blocks <= cfg.vision_layers:
            raise ValueError(f"temporal blocks {blocks} outside [0, {cfg.vision_layers}]")
        self.T = blocks
        self.swa = swa or SWAConfig()
        self.disable_temporal_attention = disable_temporal_attention
        if pooling not in POOLING:
            raise ValueError(f"unknown pooling {pooling!r}")
        self.pooling = pooling
        d = cfg.d_vis
        if blocks:
            self.new_param("spatial_pos", (cfg.grid ** 2, d), scale=0.02)
            self.new_param("temporal_pos", (max_frames, d), scale=0.02)
            first = cfg.vision_layers - blocks
            self.blocks = nn.ModuleList(
                TemporalBlock(backbone.blocks[first + t], d, cfg.n_heads, seed, t, final=t == blocks - 1)
                for t in range(blocks))
        self.alpha_rng = np.random.default_rng(seed)
        self.last_alphas: list[float] = []

    def set_step(self, run_seed: int, step: int):
        """Reseed the interpolation RNG from (run seed, step) for exact replay."""
        self.alpha_rng = np.random.default_rng([int(run_seed), int(step)])

    def anchor_penalty(self) -> torch.Tensor:
        if not self.T:
            return torch.zeros(())
        return self.swa.anchor_l2 * sum(b.spatial.anchor_distance() for b in self.blocks if b.spatial is not None)

    def encode_clip(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, F, G, G, C) -> unnormalized pooled joint-space vector (B, D)."""
        bb = self.backbone
        with torch.set_grad_enabled(torch.is_grad_enabled() and bb.proj.weight.requires_grad):
            taps = bb.taps(frames)
        cls_proj = bb.project(taps[-1][..., 0, :])
        if not self.T:
            return cls_proj.mean(dim=-2)
        f = frames.shape[1]
        if f > self.temporal_pos.shape[0]:
            raise ValueError(f"{f} frames exceed the temporal positional table")
        first = len(taps) - 1 - self.T
        entry = taps[first]
        x = entry[..., 1:, :] + self.spatial_pos + self.temporal_pos[:f, None, :]
        tmp = init_tmp(entry[..., 0, :])
        alphas = []
        for t, blk in enumerate(self.blocks):
            alpha = sample_alpha(self.swa, self.alpha_rng)
            alphas.append(alpha)
            x, tmp = blk(x, tmp, taps[first + 1 + t][..., 1:, :], alpha,
                         temporal_attention=not self.disable_temporal_attention)
        self.last_alphas = alphas
        self.branch_tokens = x
        if self.pooling == "balanced":
            return (bb.project(tmp) + cls_proj.mean(dim=-2)) / 2
        return (bb.project(tmp) + cls_proj.sum(dim=-2)) / (f + 1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, F, G, G, C) or (B, clips, F, G, G, C) -> (B, D) unit vectors.

        Multiple clips are averaged before the final normalization.
        """
        if frames.dim() == 6:
            b, c = frames.shape[:2]
            z = self.encode_clip(frames.reshape(b * c, *frames.shape[2:])).reshape(b, c, -1).mean(dim=1)
        else:
            z = self.encode_clip(frames)
        return z / z.norm(dim=-1, keepdim=True)
