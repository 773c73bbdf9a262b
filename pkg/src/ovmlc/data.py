"""Seeded synthetic multi-label video dataset and manifest I/O.

Entity concepts paint a fixed latent pattern on every frame. Action concepts
move a Gaussian blob along a path; each action has a partner that traverses
the same path in reverse, so the two have identical frame multisets and any
frame-order-blind pooling cannot tell them apart.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .vocab import ACTION_CONCEPTS, ENTITY_CONCEPTS

SPLITS = ("train", "val", "test_closed", "test_open")


@dataclass(frozen=True)
class Concept:
    name: str
    synonym: str
    kind: str  # "entity" or "action"
    index: int
    partner: int | None = None


@dataclass
class SyntheticDatasetSpec:
    n_entities: int = 10
    n_actions: int = 6
    videos: dict = field(default_factory=lambda: {"train": 256, "val": 64, "test_closed": 64, "test_open": 32})
    min_labels: int = 1
    max_labels: int = 4
    noise: float = 0.5
    frames_per_video: int = 16
    grid: int = 4
    channels: int = 8
    entity_amplitude: float = 1.0
    action_amplitude: float = 3.0
    blob_width: float = 0.7
    seed: int = 0

    def validate(self):
        if self.n_entities > len(ENTITY_CONCEPTS) or self.n_actions > len(ACTION_CONCEPTS):
            raise ValueError(f"concept count exceeds word-bank capacity "
                             f"({len(ENTITY_CONCEPTS)} entities, {len(ACTION_CONCEPTS)} actions)")
        if self.n_entities < 0 or self.n_actions < 0 or self.n_actions % 2:
            raise ValueError("action concepts come in forward/reverse pairs; n_actions must be even")
        if not 1 <= self.min_labels <= self.max_labels:
            raise ValueError("need 1 <= min_labels <= max_labels")
        if self.frames_per_video < 1:
            raise ValueError("frames_per_video must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        unknown = set(self.videos) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown splits {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        return cls(**d)


def concept_table(spec: SyntheticDatasetSpec) -> list[Concept]:
    spec.validate()
    out = []
    for name, syn in list(ENTITY_CONCEPTS.items())[:spec.n_entities]:
        out.append(Concept(name, syn, "entity", len(out)))
    base = len(out)
    for j, (name, syn) in enumerate(list(ACTION_CONCEPTS.items())[:spec.n_actions]):
        out.append(Concept(name, syn, "action", base + j, base + (j ^ 1)))
    return out


class SyntheticVideos:
    """Latent patterns for a spec plus on-the-fly frame rendering."""

    def __init__(self, spec: SyntheticDatasetSpec):
        self.spec = spec
        self.concepts = concept_table(spec)
        rng = np.random.default_rng([spec.seed, 0])
        g, c = spec.grid, spec.channels
        self.patterns = {}
        self.paths = {}
        for con in self.concepts:
            if con.kind == "entity":
                self.patterns[con.index] = spec.entity_amplitude * rng.standard_normal((g, g, c))
        for con in self.concepts:
            if con.kind != "action" or con.index > con.partner:
                continue
            u = rng.standard_normal(c)
            u *= spec.action_amplitude / np.linalg.norm(u) * np.sqrt(c)
            while True:
                start, end = rng.uniform(0, g - 1, size=(2, 2))
                if np.linalg.norm(end - start) >= g / 2:
                    break
            self.patterns[con.index] = self.patterns[con.partner] = u
            self.paths[con.index] = (start, end)
            self.paths[con.partner] = (end, start)

    def action_frames(self, index: int, n_frames: int) -> np.ndarray:
        g, w = self.spec.grid, self.spec.blob_width
        start, end = self.paths[index]
        taus = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.array([0.5])
        rr, cc = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        out = np.empty((n_frames, g, g, self.spec.channels))
        for f, tau in enumerate(taus):
            p = start + tau * (end - start)
            bump = np.exp(-((rr - p[0]) ** 2 + (cc - p[1]) ** 2) / (2 * w * w))
            out[f] = bump[..., None] * self.patterns[index]
        return out

    def render(self, concepts, noise_seed: int, n_frames: int | None = None) -> np.ndarray:
        """Frames (n, G, G, C) float32: sum of concept patterns plus Gaussian noise."""
        s = self.spec
        n = s.frames_per_video if n_frames is None else n_frames
        frames = np.zeros((n, s.grid, s.grid, s.channels))
        for i in concepts:
            if self.concepts[i].kind == "entity":
                frames += self.patterns[i]
            else:
                frames += self.action_frames(i, n)
        if s.noise:
            frames += s.noise * np.random.default_rng(noise_seed).standard_normal(frames.shape)
        return frames.astype(np.float32)


def _sample_concepts(rng, concepts, spec):
    k = int(rng.integers(spec.min_labels, spec.max_labels + 1))
    k = min(k, len(concepts) - len([c for c in concepts if c.partner is not None]) // 2)
    while True:
        pick = sorted(int(i) for i in rng.choice(len(concepts), size=k, replace=False))
        # A clip never shows an action together with its own reversal.
        if not any(concepts[i].partner in pick for i in pick):
            return pick


def generate_synthetic_dataset(spec: SyntheticDatasetSpec) -> tuple[list[dict], list[str]]:
    """Manifest records and the closed vocabulary (canonical names)."""
    videos = SyntheticVideos(spec)
    concepts = videos.concepts
    rng = np.random.default_rng([spec.seed, 1])
    records = []
    for split in SPLITS:
        for v in range(spec.videos.get(split, 0)):
            pick = _sample_concepts(rng, concepts, spec)
            names = [concepts[i].synonym if split == "test_open" else concepts[i].name for i in pick]
            records.append({
                "video": f"{split}_{v:05d}",
                "split": split,
                "labels": names,
                "source": {"kind": "synthetic", "concepts": pick,
                           "noise_seed": int(rng.integers(2 ** 63)), "frames": spec.frames_per_video},
            })
    vocab = [c.name for c in concepts] + [c.synonym for c in concepts]
    return records, vocab


class Dataset:
    """A manifest plus whatever is needed to materialize its frames."""

    def __init__(self, records: list[dict], vocabulary: list[str], spec: SyntheticDatasetSpec | None = None,
                 root: Path | None = None, label_info: dict | None = None):
        self.records = records
        self.vocabulary = list(vocabulary)
        self.spec = spec
        self.root = Path(root) if root else None
        self._videos = SyntheticVideos(spec) if spec is not None else None
        self.by_id = {r["video"]: r for r in records}
        if len(self.by_id) != len(records):
            raise ValueError("duplicate video ids in manifest")
        known = set(self.vocabulary)
        for r in records:
            missing = [lb for lb in r["labels"] if lb not in known]
            if missing:
                raise ValueError(f"video {r['video']} has labels outside the vocabulary: {missing}")
        self.label_info = label_info or (_label_info(self._videos.concepts) if self._videos else {})

    @classmethod
    def synthetic(cls, spec: SyntheticDatasetSpec) -> "Dataset":
        records, vocab = generate_synthetic_dataset(spec)
        return cls(records, vocab, spec)

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def split_vocabulary(self, name: str) -> list[str]:
        """Labels a split is evaluated against: canonical names, or synonyms for the open split."""
        if self.label_info:
            want_open = name == "test_open"
            return [lb for lb, info in self.label_info.items() if info["open"] == want_open]
        seen = dict.fromkeys(lb for r in self.split(name) for lb in r["labels"])
        return list(seen)

    def labels_of_kind(self, kind: str) -> set[str]:
        return {lb for lb, info in self.label_info.items() if info["kind"] == kind}

    def frames(self, record: dict) -> np.ndarray:
        src = record["source"]
        if src["kind"] == "synthetic":
            if self._videos is None:
                raise ValueError("synthetic record but no generator spec loaded")
            return self._videos.render(src["concepts"], src["noise_seed"], src.get("frames"))
        if src["kind"] == "raw":
            path = Path(src["path"])
            if not path.is_absolute() and self.root is not None:
                path = self.root / path
            data = np.fromfile(path, dtype="<f4")
            shape = tuple(src["shape"])
            if data.size != int(np.prod(shape)):
                raise ValueError(f"raw frame file {path} has {data.size} values, expected shape {shape}")
            return data.reshape(shape)
        raise ValueError(f"unknown frame source kind {src['kind']!r}")

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if self.spec is not None:
            (out / "dataset.json").write_text(json.dumps(asdict(self.spec), indent=2, sort_keys=True) + "\n")
        _write_lines(out / "manifest.jsonl", (json.dumps(r, sort_keys=True) for r in self.records))
        _write_lines(out / "vocab.txt", self.vocabulary)
        _write_lines(out / "labels.jsonl",
                     (json.dumps({"label": lb, **info}, sort_keys=True) for lb, info in self.label_info.items()))

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        spec = None
        if (root / "dataset.json").exists():
            spec = SyntheticDatasetSpec.from_dict(json.loads((root / "dataset.json").read_text()))
        records = [json.loads(ln) for ln in (root / "manifest.jsonl").read_text(encoding="utf-8").splitlines() if ln]
        vocab = [ln for ln in (root / "vocab.txt").read_text(encoding="utf-8").splitlines() if ln]
        info = None
        if (root / "labels.jsonl").exists():
            info = {}
            for ln in (root / "labels.jsonl").read_text(encoding="utf-8").splitlines():
                if ln:
                    d = json.loads(ln)
                    info[d.pop("label")] = d
        return cls(records, vocab, spec, root, info)


def _label_info(concepts: list[Concept]) -> dict:
    info = {c.name: {"concept": c.index, "kind": c.kind, "open": False} for c in concepts}
    info.update({c.synonym: {"concept": c.index, "kind": c.kind, "open": True} for c in concepts})
    return info


def _write_lines(path: Path, lines):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for ln in lines:
            f.write(ln + "\n")
    os.replace(tmp, path)
