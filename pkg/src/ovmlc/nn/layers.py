"""Attention and pre-norm transformer blocks.

Weights are stored ``(in, out)`` and initialized through :func:`seeded_init`
keyed by the parameter's name path, so construction order never changes values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .rng import derive_seed, seeded_init


class NonFiniteError(FloatingPointError):
    """Raised when a block produces NaN or Inf activations."""


class DegenerateMaskError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionSpec:
    n_heads: int
    model_dim: int
    causal: bool = False

    def __post_init__(self):
        if self.n_heads <= 0 or self.model_dim <= 0:
            raise ValueError("n_heads and model_dim must be positive")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


class SeededModule(nn.Module):
    """Module whose parameters are drawn from a name-keyed seeded stream."""

    def __init__(self, seed: int, name: str):
        super().__init__()
        self.seed = int(seed)
        self.name = name

    def new_param(self, attr: str, shape, scheme="normal_scaled", scale=None) -> nn.Parameter:
        values = seeded_init(tuple(shape), derive_seed(self.seed, f"{self.name}.{attr}"), scheme, scale)
        p = nn.Parameter(torch.from_numpy(values))
        self.register_parameter(attr, p)
        return p


def scaled_dot_attention(queries, keys, values, mask=None):
    """Softmax attention over the last two axes.

    ``mask`` is boolean, True where a key is visible. Leading axes broadcast.
    """
    if mask is not None and not bool(mask.any(dim=-1).all()):
        raise DegenerateMaskError("degenerate mask: a query row has no visible keys")
    logits = (queries * (1.0 / math.sqrt(queries.shape[-1]))) @ keys.transpose(-1, -2)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1) @ values


def causal_mask(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


class Linear(SeededModule):
    def __init__(self, d_in, d_out, seed, name, zero=False, bias=True):
        super().__init__(seed, name)
        self.new_param("weight", (d_in, d_out), "zeros" if zero else "normal_scaled")
        if bias:
            self.new_param("bias", (d_out,), "zeros")
        else:
            self.bias = None

    def forward(self, x):
        if self.bias is None:
            return x @ self.weight
        lead = x.shape[:-1]
        y = torch.addmm(self.bias, x.reshape(-1, x.shape[-1]), self.weight)
        return y.reshape(*lead, y.shape[-1])


class LayerNorm(SeededModule):
    def __init__(self, dim, seed, name):
        super().__init__(seed, name)
        self.new_param("gain", (dim,), "ones")
        self.new_param("bias", (dim,), "zeros")

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.gain, self.bias, eps=1e-5)


class MultiHeadAttention(SeededModule):
    """Multi-head attention; self-attention uses one fused (d, 3d) projection."""

    def __init__(self, spec: AttentionSpec, seed, name, zero_out=False, cross=False):
        super().__init__(seed, name)
        self.spec = spec
        d = spec.model_dim
        if cross:
            self.q = Linear(d, d, seed, f"{name}.q")
            self.kv = Linear(d, 2 * d, seed, f"{name}.kv")
        else:
            self.qkv = Linear(d, 3 * d, seed, f"{name}.qkv")
        self.out = Linear(d, d, seed, f"{name}.out", zero=zero_out)
        self.is_cross = cross

    def _split(self, x):
        *lead, s, _ = x.shape
        return x.reshape(*lead, s, self.spec.n_heads, self.spec.head_dim).transpose(-2, -3)

    def _merge(self, h):
        h = h.transpose(-2, -3)
        return self.out(h.reshape(*h.shape[:-2], self.spec.model_dim))

    def _heads(self, x):
        return x.reshape(*x.shape[:-1], self.spec.n_heads, self.spec.head_dim)

    def project_kv(self, context):
        k, v = self.kv(context).chunk(2, dim=-1)
        return self._split(k), self._split(v)

    def project_qkv(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self._split(q), self._split(k), self._split(v)

    def step_kv(self, context):
        """Keys/values as contiguous (B, S, H, dh) for single-query decoding."""
        k, v = self.kv(context).chunk(2, dim=-1)
        return self._heads(k.contiguous()), self._heads(v.contiguous())

    def attend_step(self, q, k, v):
        """Single-query attention, (B, H, dh) against (B, S, H, dh) -> (B, d).

        Broadcast products on contiguous layouts beat CPU bmm at these sizes.
        """
        logits = ((q * (1.0 / math.sqrt(q.shape[-1]))).unsqueeze(1) * k).sum(-1)
        w = torch.softmax(logits, dim=1)
        h = (w.unsqueeze(-1) * v).sum(1)
        return self.out(h.reshape(h.shape[0], self.spec.model_dim))

    def forward(self, x, context=None, mask=None):
        if self.is_cross:
            if context is None:
                raise ValueError(f"{self.name} needs a context")
            q, (k, v) = self._split(self.q(x)), self.project_kv(context)
        else:
            q, k, v = self.project_qkv(x)
            if self.spec.causal:
                cm = causal_mask(x.shape[-2], x.device)
                mask = cm if mask is None else mask & cm
        if mask is not None and mask.dim() >= 3:
            mask = mask.unsqueeze(-3)
        return self._merge(scaled_dot_attention(q, k, v, mask))


class TransformerBlock(SeededModule):
    """Pre-norm residual block: self-attention, optional cross-attention, MLP."""

    def __init__(self, dim, n_heads, seed, name, causal=False, cross=False, mlp_ratio=4,
                 zero_residual=False):
        super().__init__(seed, name)
        self.spec = AttentionSpec(n_heads, dim, causal)
        self.ln1 = LayerNorm(dim, seed, f"{name}.ln1")
        self.attn = MultiHeadAttention(self.spec, seed, f"{name}.attn", zero_out=zero_residual)
        if cross:
            self.ln_cross = LayerNorm(dim, seed, f"{name}.ln_cross")
            self.cross = MultiHeadAttention(AttentionSpec(n_heads, dim, False), seed, f"{name}.cross",
                                            zero_out=zero_residual, cross=True)
        else:
            self.cross = None
        self.ln2 = LayerNorm(dim, seed, f"{name}.ln2")
        self.fc1 = Linear(dim, mlp_ratio * dim, seed, f"{name}.fc1")
        self.fc2 = Linear(mlp_ratio * dim, dim, seed, f"{name}.fc2", zero=zero_residual)

    def forward(self, x, context=None, mask=None, context_mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        if self.cross is not None:
            if context is None:
                raise ValueError(f"block {self.name} needs a cross-attention context")
            x = x + self.cross(self.ln_cross(x), context=context, mask=context_mask)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        check_finite(x, self.name)
        return x

    def forward_step(self, x, cache: dict, cross_kv=None):
        """Causal incremental step for the newest position ``x`` (B, d).

        ``cache`` accumulates this block's self-attention keys/values across
        calls; the result equals the last row of a full causal ``forward``.
        ``cross_kv`` comes from ``self.cross.step_kv``. Finiteness is left to
        the caller (checked once per decode).
        """
        a = self.attn
        q, k, v = (a._heads(t.contiguous()) for t in a.qkv(self.ln1(x)).chunk(3, dim=-1))
        k, v = k.unsqueeze(1), v.unsqueeze(1)
        if "k" in cache:
            k, v = torch.cat([cache["k"], k], dim=1), torch.cat([cache["v"], v], dim=1)
        cache["k"], cache["v"] = k, v
        x = x + a.attend_step(q, k, v)
        if self.cross is not None:
            c = self.cross
            x = x + c.attend_step(c._heads(c.q(self.ln_cross(x))), *cross_kv)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class AttentionLayer(SeededModule):
    """Pre-norm residual self-attention without MLP (temporal attention)."""

    def __init__(self, dim, n_heads, seed, name, zero_out=False):
        super().__init__(seed, name)
        self.ln = LayerNorm(dim, seed, f"{name}.ln")
        self.attn = MultiHeadAttention(AttentionSpec(n_heads, dim), seed, f"{name}.attn", zero_out=zero_out)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln(x), mask=mask)
        check_finite(x, self.name)
        return x


def check_finite(x: torch.Tensor, where: str):
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite activations in {where}")


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def snapshot(module: nn.Module) -> dict[str, np.ndarray]:
    """Byte copy of every parameter, keyed by name path."""
    return {n: p.detach().cpu().numpy().copy() for n, p in module.named_parameters()}


def changed_parameters(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> set[str]:
    return {n for n in before if before[n].tobytes() != after[n].tobytes()}
