"""Seeded, platform-stable parameter initialization.

All randomness flows through numpy's PCG64 bit generator. Values are drawn in
float64 in C (row-major) order and only then cast, so a given
``(shape, seed, scheme)`` produces the same bytes on every platform.
"""
from __future__ import annotations

import hashlib

import numpy as np

SCHEMES = ("normal_scaled", "zeros", "ones")


def derive_seed(seed: int, name: str) -> int:
    """Stable 63-bit sub-seed for a named parameter."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def seeded_init(shape, seed: int, scheme: str = "normal_scaled", scale: float | None = None,
                dtype=np.float32) -> np.ndarray:
    """Deterministic array of ``shape``.

    ``normal_scaled`` draws N(0, 1) and multiplies by ``scale``; when ``scale`` is
    omitted it defaults to ``1/sqrt(shape[0])`` for matrices (fan-in, weights are
    stored ``(in, out)``) and 1 for vectors.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "ones":
        return np.ones(shape, dtype=dtype)
    if scheme != "normal_scaled":
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {SCHEMES}")
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0]) if len(shape) >= 2 else 1.0
    rng = np.random.Generator(np.random.PCG64(seed))
    return (rng.standard_normal(shape) * scale).astype(dtype)
