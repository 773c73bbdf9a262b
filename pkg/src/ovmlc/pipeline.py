"""Synthetic label generation: captions -> concepts -> clustered vocabulary -> assignments.

Model-backed stages go through small interfaces (:class:`Captioner`,
:class:`Extractor`, :class:`TextEmbedder`). Deterministic table-driven stubs are
provided so the whole pipeline runs offline.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np

from .backbones import normalize_text
from .kernels import assign_clusters
from .vocab import ACTION_CONCEPTS, ENTITY_CONCEPTS, WORD_SYNONYMS

log = logging.getLogger(__name__)

CAPTION_SLOT = "<output_captions>"
ASSIGN_TEMPLATE = "a video of {label}"


def extraction_prompt() -> str:
    return resources.files("ovmlc.resources").joinpath("extract_prompt.txt").read_text(encoding="utf-8")


def render_prompt(captions: list[str]) -> str:
    """The in-context extraction prompt with the video's captions as a numbered list."""
    if not captions:
        raise ValueError("a caption record needs at least one caption")
    block = "\n".join(f"{i}. {c}" for i, c in enumerate(captions, 1))
    return extraction_prompt().replace(CAPTION_SLOT, block)


_ITEM = re.compile(r"^\s*\d+\s*[.)]\s*(.+?)\s*$")


def normalize_concept(text: str) -> str:
    return " ".join(text.lower().split()).rstrip(".").strip()


def parse_numbered_list(completion: str) -> list[str]:
    items = []
    for line in completion.splitlines():
        m = _ITEM.match(line)
        if m:
            item = normalize_concept(m.group(1))
            if item:
                items.append(item)
    return items


# interfaces and stubs


class Captioner(Protocol):
    def caption(self, record: dict) -> list[str]: ...


class Extractor(Protocol):
    def complete(self, prompt: str) -> str: ...


class TextEmbedder(Protocol):
    def embed(self, texts: list[str]) -> np.ndarray: ...


def _stable_int(*parts) -> int:
    return int.from_bytes(hashlib.sha256("/".join(map(str, parts)).encode()).digest()[:8], "little")


CAPTION_TABLE = {
    "water slide": ["a child is water sliding in the park", "people riding water slide on a sunny day",
                    "a water slide at the beach"],
    "bicycle": ["a person is riding a bike on the road", "a bicycle parked on the street"],
    "guitar": ["a man is playing a guitar on a stage", "a guitar on the floor of a room"],
}
GENERIC_CAPTIONS = ["a video of {label}", "a {label} in a field", "{label} seen during the day"]


class StubCaptioner:
    """Captions from a record's labels through fixed phrase tables."""

    def __init__(self, per_label: int = 2, seed: int = 0):
        self.per_label = per_label
        self.seed = seed

    def caption(self, record: dict) -> list[str]:
        out = []
        for label in record["labels"]:
            table = CAPTION_TABLE.get(label, [t.format(label=label) for t in GENERIC_CAPTIONS])
            start = _stable_int(self.seed, record["video"], label) % len(table)
            out.extend(table[(start + j) % len(table)] for j in range(min(self.per_label, len(table))))
        return out or ["an empty scene"]


def default_keywords() -> dict[str, str]:
    kw = {name: name for name in [*ENTITY_CONCEPTS, *ENTITY_CONCEPTS.values(), *ACTION_CONCEPTS,
                                  *ACTION_CONCEPTS.values()]}
    kw.update({"water sliding": "water sliding", "riding water slide": "riding water slide",
               "riding a bike": "riding bike", "playing a guitar": "playing guitar",
               "riding motorcycles": "riding motorcycle", "performing on stage": "performing on stage"})
    return kw


class StubExtractor:
    """Keyword-table extractor: finds known phrases in the prompt's last caption block."""

    def __init__(self, keywords: dict[str, str] | None = None):
        self.keywords = keywords or default_keywords()

    def complete(self, prompt: str) -> str:
        block = prompt.rsplit("Video 4 description:", 1)[-1].split("Verbs Found:", 1)[0]
        found = []
        for line in block.splitlines():
            text = " " + normalize_text(re.sub(r"^\s*\d+\.\s*", "", line)) + " "
            # Longest phrases first; a matched span is blanked so sub-phrases are not double counted.
            for phrase in sorted(self.keywords, key=lambda p: (-len(p), p)):
                if f" {phrase} " in text:
                    found.append(self.keywords[phrase])
                    text = text.replace(f" {phrase} ", " | ")
        if not found:
            return "No actions could be identified."
        return "\n".join(f"{i}. {c}" for i, c in enumerate(dict.fromkeys(found), 1))


STOPWORDS = frozenset("a an the of in on at is are to and with video clip".split())


def stem(word: str) -> str:
    return re.sub(r"(ing|es|e|s)$", "", word) if len(word) > 4 else word


class HashingEmbedder:
    """Bag of stemmed, synonym-canonicalized words; each word gets a seeded random direction."""

    def __init__(self, dim: int = 64, seed: int = 0, synonyms: dict[str, str] | None = None):
        self.dim = dim
        self.seed = seed
        self.synonyms = WORD_SYNONYMS if synonyms is None else synonyms
        self._cache: dict[str, np.ndarray] = {}

    def _word(self, w: str) -> np.ndarray:
        if w not in self._cache:
            self._cache[w] = np.random.default_rng(_stable_int(self.seed, w)).standard_normal(self.dim)
        return self._cache[w]

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, t in enumerate(texts):
            words = [stem(self.synonyms.get(w, w)) for w in normalize_text(t).split() if w not in STOPWORDS]
            v = sum((self._word(w) for w in words), np.zeros(self.dim))
            n = np.linalg.norm(v)
            out[i] = v / n if n > 0 else self._word("<empty>") / np.linalg.norm(self._word("<empty>"))
        return out


# stages


def extract_concepts(captions: list[str], extractor: Extractor) -> list[str]:
    completion = extractor.complete(render_prompt(captions))
    items = parse_numbered_list(completion)
    if not items:
        log.warning("extractor completion had no numbered items; recording no concepts")
    return items


def embed_concepts(concepts, embedder: TextEmbedder) -> tuple[list[str], np.ndarray]:
    distinct = list(dict.fromkeys(concepts))
    return distinct, embedder.embed(distinct) if distinct else np.zeros((0, getattr(embedder, "dim", 0)))


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float]
    iterations: int


def kmeans(vectors: np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; stops at an assignment fixpoint."""
    x = np.asarray(vectors, dtype=np.float64)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(np.unique(x, axis=0)):
        raise ValueError(f"k={k} exceeds the number of distinct vectors")
    rng = np.random.default_rng(seed)
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = ((x[:, None, :] - np.array(centroids)[None]) ** 2).sum(-1).min(axis=1)
        centroids.append(x[rng.choice(len(x), p=d2 / d2.sum())])
    c = np.array(centroids)
    labels, inertia = assign_clusters(x, c)
    history = [inertia]
    it = 0
    for it in range(1, max_iters + 1):
        for j in range(k):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean(axis=0)
        new, inertia = assign_clusters(x, c)
        history.append(inertia)
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, c, history, it)


@dataclass
class ClusterMap:
    cluster_of: dict  # concept -> cluster id
    canonical: dict  # cluster id -> canonical label
    frequency: dict  # concept -> corpus frequency

    @property
    def vocabulary(self) -> list[str]:
        return sorted(set(self.canonical.values()))

    def records(self) -> list[dict]:
        return [{"label": c, "frequency": self.frequency[c], "cluster": self.cluster_of[c],
                 "canonical": self.canonical[self.cluster_of[c]]} for c in sorted(self.cluster_of)]

    def canonical_records(self) -> list[dict]:
        """One record per cluster: the canonical label with the cluster's total frequency."""
        totals = Counter()
        for c, cid in self.cluster_of.items():
            totals[cid] += self.frequency[c]
        return [{"label": self.canonical[cid], "frequency": totals[cid], "cluster": cid}
                for cid in sorted(self.canonical)]


def dedup_vocabulary(frequencies: dict, assignment: dict) -> ClusterMap:
    """Most frequent member names each cluster; ties go to the lexicographically smallest."""
    missing = set(frequencies) - set(assignment)
    if missing:
        raise ValueError(f"concepts without a cluster: {sorted(missing)[:5]}")
    members: dict = {}
    for c in frequencies:
        members.setdefault(int(assignment[c]), []).append(c)
    canonical = {cid: min(ms, key=lambda c: (-frequencies[c], c)) for cid, ms in members.items()}
    return ClusterMap({c: int(assignment[c]) for c in frequencies}, canonical, dict(frequencies))


def dedup_stage(vocab_records: list[dict], embedder: TextEmbedder, seed: int = 0, k: int | None = None) -> ClusterMap:
    """Cluster concept records and canonicalize.

    Records that already carry a ``cluster`` field (a previous dedup's output)
    keep it, so running dedup on its own output is the identity.
    """
    freqs = Counter()
    for r in vocab_records:
        freqs[r["label"]] += int(r.get("frequency", 1))
    if vocab_records and all("cluster" in r for r in vocab_records):
        return dedup_vocabulary(dict(freqs), {r["label"]: r["cluster"] for r in vocab_records})
    concepts = sorted(freqs)
    if not concepts:
        return ClusterMap({}, {}, {})
    vecs = embedder.embed(concepts)
    n_distinct = len(np.unique(vecs, axis=0))
    k = min(k or math.ceil(len(concepts) / 3), n_distinct)
    res = kmeans(vecs, k, seed)
    return dedup_vocabulary(dict(freqs), dict(zip(concepts, res.labels.tolist())))


def assign_labels(captions: dict, vocabulary: list[str], embedder: TextEmbedder,
                  top_k: int = 10, min_sim: float = 0.7) -> dict:
    """Per video, labels whose rendered prompt is within ``min_sim`` cosine of some caption."""
    if not vocabulary:
        raise ValueError("empty vocabulary")
    lab = embedder.embed([ASSIGN_TEMPLATE.format(label=v) for v in vocabulary])
    out = {}
    for video, caps in captions.items():
        if not caps:
            out[video] = []
            continue
        sims = (embedder.embed(list(caps)) @ lab.T).max(axis=0)
        order = sorted((j for j in range(len(vocabulary)) if sims[j] >= min_sim),
                       key=lambda j: (-sims[j], vocabulary[j]))
        out[video] = [vocabulary[j] for j in order[:top_k]]
    return out


def merge_manifests(records: list[dict], assignments: dict) -> tuple[list[dict], list[str]]:
    """Union each video's labels with its assignments; returns new records and the label union."""
    ids = {r["video"] for r in records}
    unknown = set(assignments) - ids
    if unknown:
        raise KeyError(f"assignments for unknown videos: {sorted(unknown)[:5]}")
    merged = []
    for r in records:
        labels = list(dict.fromkeys([*r["labels"], *assignments.get(r["video"], [])]))
        merged.append({**r, "labels": labels})
    vocab = list(dict.fromkeys(lb for r in merged for lb in r["labels"]))
    return merged, vocab


# JSONL stage files


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(ln) for ln in f if ln.strip()]


def write_jsonl(path, records):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def stage_captions(manifest: list[dict], captioner: Captioner) -> list[dict]:
    return [{"video": r["video"], "captions": captioner.caption(r)} for r in manifest]


def stage_extract(captions: list[dict], extractor: Extractor) -> list[dict]:
    return [{"video": r["video"], "concepts": extract_concepts(r["captions"], extractor)} for r in captions]


def stage_dedup(concepts: list[dict], embedder: TextEmbedder, seed: int = 0) -> list[dict]:
    freqs = Counter(c for r in concepts for c in r["concepts"])
    recs = [{"label": c, "frequency": n} for c, n in sorted(freqs.items())]
    return dedup_stage(recs, embedder, seed).records()


def stage_assign(captions: list[dict], vocab: list[dict], embedder: TextEmbedder,
                 top_k: int = 10, min_sim: float = 0.7) -> list[dict]:
    vocabulary = sorted({r.get("canonical", r["label"]) for r in vocab})
    got = assign_labels({r["video"]: r["captions"] for r in captions}, vocabulary, embedder, top_k, min_sim)
    return [{"video": v, "labels": got[v]} for v in sorted(got)]


def stage_merge(manifest: list[dict], assignments: list[dict]) -> list[dict]:
    merged, _ = merge_manifests(manifest, {r["video"]: r["labels"] for r in assignments})
    return merged


def run_pipeline(manifest: list[dict], out_dir, captioner=None, extractor=None, embedder=None,
                 seed: int = 0, top_k: int = 10, min_sim: float = 0.7) -> dict:
    """All stages end to end, persisting each intermediate; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    captioner = captioner or StubCaptioner(seed=seed)
    extractor = extractor or StubExtractor()
    embedder = embedder or HashingEmbedder(seed=seed)
    paths = {k: out / f"{k}.jsonl" for k in ("captions", "concepts", "vocab", "assignments", "manifest")}
    caps = stage_captions(manifest, captioner)
    write_jsonl(paths["captions"], caps)
    conc = stage_extract(caps, extractor)
    write_jsonl(paths["concepts"], conc)
    vocab = stage_dedup(conc, embedder, seed)
    write_jsonl(paths["vocab"], vocab)
    assign = stage_assign(caps, vocab, embedder, top_k, min_sim)
    write_jsonl(paths["assignments"], assign)
    write_jsonl(paths["manifest"], stage_merge(manifest, assign))
    return paths
