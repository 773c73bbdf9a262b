"""Flat binary checkpoint format.

Layout (all integers little-endian uint32)::

    header:  version, record count
    record:  name length, name bytes (UTF-8), ndim, dims..., float32 data (C order)
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from collections import OrderedDict

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_arrays(arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_arrays(data: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last record")
    return out


def state_arrays(module: torch.nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.detach().cpu().float().numpy()) for k, v in module.state_dict().items())


def save_checkpoint(module: torch.nn.Module, path) -> str:
    """Write ``module``'s state atomically; returns the SHA-256 of the file bytes."""
    data = encode_arrays(state_arrays(module))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(module: torch.nn.Module, path) -> str:
    with open(path, "rb") as f:
        data = f.read()
    arrays = decode_arrays(data)
    state = module.state_dict()
    missing = set(state) - set(arrays)
    unexpected = set(arrays) - set(state)
    if missing or unexpected:
        raise CheckpointError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
    with torch.no_grad():
        for k, t in state.items():
            if tuple(t.shape) != arrays[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {tuple(t.shape)} vs {arrays[k].shape}")
            t.copy_(torch.from_numpy(arrays[k]).to(t.dtype))
    return hashlib.sha256(data).hexdigest()


def checkpoint_hash(module: torch.nn.Module) -> str:
    return hashlib.sha256(encode_arrays(state_arrays(module))).hexdigest()
