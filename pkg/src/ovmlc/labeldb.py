"""Persistent label-embedding database for vocabulary expansion and inference.

File layout (little-endian)::

    b"OVDB", version u32, D u32, count u32,
    variant length u16 + UTF-8, checkpoint hash (32 raw bytes, zeros when empty)
    per entry: label length u32 + UTF-8 bytes, D float32
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

MAGIC = b"OVDB"
DB_VERSION = 1
NO_HASH = "0" * 64


class DatabaseError(ValueError):
    pass


class ModelMismatchError(DatabaseError):
    pass


@dataclass
class VocabularyDB:
    dim: int
    variant: str = ""
    model_hash: str = NO_HASH
    labels: list[str] = field(default_factory=list)
    vectors: np.ndarray | None = None

    def __post_init__(self):
        if self.vectors is None:
            self.vectors = np.zeros((0, self.dim), dtype=np.float32)
        self.vectors = np.asarray(self.vectors, dtype=np.float32).reshape(-1, self.dim)
        if len(self.labels) != len(self.vectors):
            raise DatabaseError("label and vector counts differ")
        if len(set(self.labels)) != len(self.labels):
            raise DatabaseError("duplicate labels")
        if len(self.labels):
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            if np.abs(norms - 1).max() > 1e-5:
                raise DatabaseError("database vectors must be unit-norm")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (isinstance(other, VocabularyDB) and self.dim == other.dim and self.variant == other.variant
                and self.model_hash == other.model_hash and self.labels == other.labels
                and self.vectors.tobytes() == other.vectors.tobytes())

    def vector(self, label: str) -> np.ndarray:
        return self.vectors[self.labels.index(label)]


def encode_db(db: VocabularyDB) -> bytes:
    buf = io.BytesIO()
    variant = db.variant.encode("utf-8")
    buf.write(MAGIC + struct.pack("<III", DB_VERSION, db.dim, len(db)))
    buf.write(struct.pack("<H", len(variant)) + variant)
    buf.write(bytes.fromhex(db.model_hash))
    for label, vec in zip(db.labels, db.vectors):
        raw = label.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_db(data: bytes, expect_dim: int | None = None) -> VocabularyDB:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DatabaseError("truncated database file")
        pos += n
        return data[pos - n:pos]

    if take(4) != MAGIC:
        raise DatabaseError("not a vocabulary database (bad magic)")
    version, dim, count = struct.unpack("<III", take(12))
    if version != DB_VERSION:
        raise DatabaseError(f"unsupported database version {version}")
    if expect_dim is not None and dim != expect_dim:
        raise DatabaseError(f"database dimension {dim} != expected {expect_dim}")
    (n,) = struct.unpack("<H", take(2))
    variant = take(n).decode("utf-8")
    model_hash = take(32).hex()
    labels, vecs = [], []
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        labels.append(take(n).decode("utf-8"))
        vecs.append(np.frombuffer(take(4 * dim), dtype="<f4"))
    if pos != len(data):
        raise DatabaseError("trailing bytes after last entry")
    vectors = np.array(vecs, dtype=np.float32).reshape(count, dim)
    return VocabularyDB(dim, variant, model_hash, labels, vectors)


def save_db(db: VocabularyDB, path) -> None:
    """Atomic write: temp file then rename."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_db(db))
    os.replace(tmp, path)


def load_db(path, expect_dim: int | None = None) -> VocabularyDB:
    with open(path, "rb") as f:
        return decode_db(f.read(), expect_dim)


def expand_vocabulary(db: VocabularyDB, labels, encode, model_hash: str, variant: str) -> VocabularyDB:
    """New db with embeddings appended for labels not yet present; existing rows untouched.

    ``encode`` maps a list of labels to (n, D) unit vectors. Labels are encoded
    one at a time so a label's vector never depends on what it was batched with.
    """
    if len(db) and (db.model_hash != model_hash or db.variant != variant):
        raise ModelMismatchError("vocabulary built with different model")
    fresh = [lb for lb in dict.fromkeys(labels) if lb not in set(db.labels)]
    if any(not lb.strip() for lb in fresh):
        raise DatabaseError("labels must be nonempty")
    rows = [np.asarray(encode([lb]), dtype=np.float32).reshape(-1) for lb in fresh]
    if rows and rows[0].shape[0] != db.dim:
        raise DatabaseError(f"encoder dimension {rows[0].shape[0]} != database dimension {db.dim}")
    vectors = np.concatenate([db.vectors, np.array(rows, dtype=np.float32).reshape(-1, db.dim)])
    return VocabularyDB(db.dim, variant, model_hash, db.labels + fresh, vectors)


def model_encoder(model):
    """``encode`` callable for :func:`expand_vocabulary` from a trained model."""
    if model.label_encoder.variant == "dualcoop":
        raise DatabaseError("dualcoop label pairs cannot be stored in a single-vector database")

    def encode(labels):
        model.eval()
        with torch.no_grad():
            return model.label_encoder.encode(list(labels)).double().numpy()
    return encode


@dataclass
class InferenceResult:
    video: str
    scores: dict
    predicted: list | None = None


def infer(video_embedding, db: VocabularyDB, model_hash: str, video_id: str = "",
          threshold: float | None = None) -> InferenceResult:
    """Score one video embedding against every database label."""
    if not len(db):
        raise DatabaseError("empty vocabulary database")
    if db.model_hash != model_hash:
        raise ModelMismatchError("vocabulary built with different model")
    v = np.asarray(video_embedding, dtype=np.float64).reshape(-1)
    s = db.vectors.astype(np.float64) @ v
    scores = dict(zip(db.labels, s.tolist()))
    pred = None if threshold is None else [lb for lb, x in scores.items() if x >= threshold]
    return InferenceResult(video_id, scores, pred)


def infer_video(frames, db: VocabularyDB, model, model_hash: str, video_id: str = "",
                threshold: float | None = None) -> InferenceResult:
    """Encode sampled frames ``(clips, F, G, G, C)`` once, then score against ``db``."""
    model.eval()
    model.set_swa(False)
    with torch.no_grad():
        emb = model.video_encoder(torch.as_tensor(frames)[None])[0]
    model.set_swa(True)
    return infer(emb.double().numpy(), db, model_hash, video_id, threshold)
