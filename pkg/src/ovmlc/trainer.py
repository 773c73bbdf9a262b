"""Batch construction, scoring, the weighted BCE objective and the training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import BackboneConfig, Backbones
from .data import Dataset, SyntheticDatasetSpec
from .label_encoder import LabelEncoder
from .nn.checkpoint import checkpoint_hash, save_checkpoint
from .nn.optim import AdamW, warmup_cosine
from .video_encoder import SWAConfig, VideoEncoder, sample_frames

log = logging.getLogger(__name__)

DEFAULTS = {
    "seed": 0,
    "backbone.seed": 0,
    "backbone.unfreeze": False,
    "data.dir": None,
    "data.noise": 0.5,
    "data.seed": 0,
    "policy": "ours",
    "label_encoder.variant": "learnable_llm",
    "label_encoder.prefixes": 4,
    "label_encoder.attributes": 5,
    "label_encoder.attribute_len": 5,
    "label_encoder.context_len": 4,
    "temporal.enabled": True,
    "temporal.blocks": 4,
    "temporal.lambda": 0.5,
    "temporal.mode": "train_stochastic",
    "temporal.eval_mode": "eval_mean",
    "temporal.swa": True,
    "temporal.anchor_l2": 1e-6,
    "temporal.disable_temporal_attention": False,
    "temporal.pooling": "tokens",
    "video.frames_per_clip": 8,
    "video.eval_clips": 4,
    "loss.kind": "multilabel_bce",
    "loss.temperature": 0.05,
    "loss.negative_weight": 1.0,
    "loss.balance": False,
    "train.steps": 2000,
    "train.batch_size": 4,
    "train.lr": 3e-4,
    "train.warmup": 100,
    "train.weight_decay": 0.0,
    "train.eval_every": 500,
    "train.checkpoint_every": 500,
}


class ConfigError(ValueError):
    pass


def load_preset(name: str) -> dict:
    text = resources.files("ovmlc.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def make_config(overrides: dict | None = None, path=None) -> dict:
    """Defaults, then a JSON file (``presets/<name>.json`` or a path), then overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        cfg.update(json.loads(p.read_text()) if p.exists() else load_preset(p.stem))
    cfg.update(overrides or {})
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if cfg["loss.temperature"] <= 0 or cfg["loss.negative_weight"] <= 0:
        raise ConfigError("loss.temperature and loss.negative_weight must be positive")
    if cfg["loss.kind"] not in ("multilabel_bce", "single_label_ce"):
        raise ConfigError(f"unknown loss kind {cfg['loss.kind']!r}")
    if cfg["policy"] not in POLICIES:
        raise ConfigError(f"unknown policy {cfg['policy']!r}")
    return cfg


# batches


class BatchBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingBatch:
    videos: tuple[str, ...]
    positives: tuple[frozenset, ...]
    pool_positives: frozenset
    pool_negatives: frozenset
    labels: tuple[str, ...]  # P_B then N_B, each sorted; the column order of the score matrix

    def negatives(self, i: int) -> frozenset:
        return frozenset(self.labels) - self.positives[i]

    def targets(self) -> np.ndarray:
        return np.array([[lb in pos for lb in self.labels] for pos in self.positives], dtype=np.float32)


def build_batch(records: list[dict], B: int, vocabulary: list[str], rng: np.random.Generator) -> TrainingBatch:
    budget = 4 * B
    vocab = list(dict.fromkeys(vocabulary))
    if len(vocab) < budget:
        raise BatchBudgetError(f"vocabulary of {len(vocab)} labels is smaller than 4B = {budget}")
    if B > len(records):
        raise BatchBudgetError(f"batch size {B} exceeds the {len(records)} available videos")
    idx = rng.choice(len(records), size=B, replace=False)
    chosen = [records[int(i)] for i in idx]
    positives = tuple(frozenset(r["labels"]) for r in chosen)
    pool_pos = frozenset().union(*positives)
    if len(pool_pos) > budget:
        raise BatchBudgetError(f"batch positives exceed class budget ({len(pool_pos)} > 4B = {budget}); "
                               "raise B or cap labels per video")
    rest = [lb for lb in vocab if lb not in pool_pos]
    neg = rng.choice(len(rest), size=budget - len(pool_pos), replace=False)
    pool_neg = frozenset(rest[int(i)] for i in neg)
    return TrainingBatch(tuple(r["video"] for r in chosen), positives, pool_pos, pool_neg,
                         tuple(sorted(pool_pos)) + tuple(sorted(pool_neg)))


# scoring and losses


def score(label_embedding, video_embedding):
    """Inner product of unit vectors; works on single vectors or (n, D) x (m, D) -> (m, n)."""
    t, v = torch.as_tensor(label_embedding), torch.as_tensor(video_embedding)
    if t.dim() == 1 and v.dim() == 1:
        return t @ v
    return v @ t.T


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    negative_weight: float = 1.0
    kind: str = "multilabel_bce"
    balance: bool = False

    def __post_init__(self):
        if self.temperature <= 0 or self.negative_weight <= 0:
            raise ValueError("temperature and negative weight must be positive")


def bce_loss(scores: torch.Tensor, targets, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Summed weighted binary cross entropy with p = sigmoid(s / tau).

    Written as softplus terms so large logits neither overflow nor lose precision.
    """
    t = torch.as_tensor(targets, dtype=scores.dtype)
    z = scores / cfg.temperature
    w = cfg.negative_weight
    if cfg.balance:
        n_neg = float((1 - t).sum())
        w = float(t.sum()) / n_neg if n_neg else 1.0
    return (t * F.softplus(-z) + w * (1 - t) * F.softplus(z)).sum()


def cross_entropy_loss(scores: torch.Tensor, targets, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    t = torch.as_tensor(targets)
    counts = t.sum(dim=-1)
    if not bool((counts == 1).all()):
        raise ValueError("single-label loss needs exactly one positive per video")
    return F.cross_entropy(scores / cfg.temperature, t.argmax(dim=-1), reduction="sum")


def batch_loss(scores, targets, cfg: LossConfig):
    fn = bce_loss if cfg.kind == "multilabel_bce" else cross_entropy_loss
    return fn(scores, targets, cfg)


# model and freeze policy


@dataclass(frozen=True)
class FreezePolicy:
    name: str
    trainable: tuple[str, ...]

    def apply(self, model: nn.Module):
        for n, p in model.named_parameters():
            p.requires_grad_(any(n.startswith(t) for t in self.trainable))
        return model

    def trainable_names(self, model: nn.Module) -> set[str]:
        return {n for n, _ in model.named_parameters() if any(n.startswith(t) for t in self.trainable)}


POLICIES = {
    "ours": ("label_encoder.", "video_encoder."),
    "vificlip": ("backbones.text.", "backbones.vision."),
    "frozen": (),
}


def freeze_policy(cfg: dict) -> FreezePolicy:
    trainable = POLICIES[cfg["policy"]]
    if cfg["backbone.unfreeze"] and "backbones.vision." not in trainable:
        trainable = trainable + ("backbones.vision.",)
    return FreezePolicy(cfg["policy"], trainable)


class Model(nn.Module):
    def __init__(self, cfg: dict, backbones: Backbones | None = None):
        super().__init__()
        self.cfg = cfg
        self.backbones = backbones or Backbones(BackboneConfig(seed=cfg["backbone.seed"]))
        seed = cfg["seed"]
        variant = cfg["label_encoder.variant"]
        self.label_encoder = LabelEncoder(
            self.backbones, variant, n_prefixes=cfg["label_encoder.prefixes"],
            n_attributes=cfg["label_encoder.attributes"], attribute_len=cfg["label_encoder.attribute_len"],
            context_len=cfg["label_encoder.context_len"], seed=seed)
        blocks = cfg["temporal.blocks"] if cfg["temporal.enabled"] else 0
        self.swa_train = SWAConfig(cfg["temporal.lambda"], cfg["temporal.mode"], cfg["temporal.anchor_l2"],
                                   cfg["temporal.swa"])
        self.swa_eval = SWAConfig(cfg["temporal.lambda"], cfg["temporal.eval_mode"], cfg["temporal.anchor_l2"],
                                  cfg["temporal.swa"])
        self.video_encoder = VideoEncoder(
            self.backbones.vision, blocks, self.swa_train, max_frames=cfg["video.frames_per_clip"], seed=seed,
            disable_temporal_attention=cfg["temporal.disable_temporal_attention"], pooling=cfg["temporal.pooling"])
        self.policy = freeze_policy(cfg)
        self.policy.apply(self)

    def set_swa(self, training: bool):
        self.video_encoder.swa = self.swa_train if training else self.swa_eval

    def loss_config(self) -> LossConfig:
        c = self.cfg
        return LossConfig(c["loss.temperature"], c["loss.negative_weight"], c["loss.kind"], c["loss.balance"])

    def label_scores(self, label_emb: torch.Tensor, video_emb: torch.Tensor) -> torch.Tensor:
        """(B, n) scores; dualcoop uses s_pos - s_neg so sigmoid(s/tau) is its two-way softmax."""
        if label_emb.dim() == 3:
            return score(label_emb[:, 0], video_emb) - score(label_emb[:, 1], video_emb)
        return score(label_emb, video_emb)


def clip_tensor(dataset: Dataset, records, F_: int, clips: int, mode: str, rng=None) -> torch.Tensor:
    """(B, F, G, G, C) for one training clip or (B, clips, F, G, G, C) for evaluation."""
    out = []
    for r in records:
        frames = dataset.frames(r)
        idx = sample_frames(len(frames), F_, clips, mode, rng)
        out.append(frames[idx])
    x = torch.from_numpy(np.stack(out))
    return x[:, 0] if mode == "train" else x


@torch.no_grad()
def embed_labels(model: Model, labels: list[str]) -> torch.Tensor:
    model.eval()
    return model.label_encoder.encode(list(labels))


@torch.no_grad()
def embed_videos(model: Model, dataset: Dataset, records, chunk: int = 16) -> torch.Tensor:
    model.eval()
    model.set_swa(False)
    cfg = model.cfg
    parts = []
    for i in range(0, len(records), chunk):
        x = clip_tensor(dataset, records[i:i + chunk], cfg["video.frames_per_clip"], cfg["video.eval_clips"], "eval")
        parts.append(model.video_encoder(x))
    model.set_swa(True)
    return torch.cat(parts)


def score_split(model: Model, dataset: Dataset, split: str, vocabulary=None):
    """Scores (n_videos, n_labels), binary truth of the same shape, the vocabulary and video ids."""
    records = dataset.split(split)
    vocab = list(vocabulary) if vocabulary is not None else dataset.split_vocabulary(split)
    emb = embed_labels(model, vocab)
    vids = embed_videos(model, dataset, records)
    s = model.label_scores(emb, vids).double().numpy()
    truth = np.array([[lb in r["labels"] for lb in vocab] for r in records], dtype=np.int8)
    return s, truth, vocab, [r["video"] for r in records]


def evaluate(model: Model, dataset: Dataset, splits=("val",)) -> dict:
    from .metrics import aupr_from_arrays, peak_f1_from_arrays

    out = {}
    for split in splits:
        s, truth, vocab, _ = score_split(model, dataset, split)
        res = {"aupr": aupr_from_arrays(s.ravel(), truth.ravel()),
               "peak_f1": peak_f1_from_arrays(s.ravel(), truth.ravel())[0]}
        actions = dataset.labels_of_kind("action")
        cols = [j for j, lb in enumerate(vocab) if lb in actions]
        if cols and truth[:, cols].any():
            res["aupr_action"] = aupr_from_arrays(s[:, cols].ravel(), truth[:, cols].ravel())
        out[split] = res
    return out


class TrainingAborted(RuntimeError):
    pass


def load_dataset(cfg: dict) -> Dataset:
    if cfg["data.dir"]:
        return Dataset.load(cfg["data.dir"])
    return Dataset.synthetic(SyntheticDatasetSpec(noise=cfg["data.noise"], seed=cfg["data.seed"]))


def train_loop(cfg: dict, out_dir=None, dataset: Dataset | None = None, model: Model | None = None,
               eval_splits=("val",), progress=None) -> tuple[Model, list[dict]]:
    """Train per ``cfg``; writes ``metrics.jsonl`` and checkpoints under ``out_dir`` when given."""
    torch.manual_seed(cfg["seed"])
    dataset = dataset or load_dataset(cfg)
    model = model or Model(cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    train = dataset.split("train")
    vocab = dataset.split_vocabulary("train")
    B, steps, F_ = cfg["train.batch_size"], cfg["train.steps"], cfg["video.frames_per_clip"]
    batch_rng = np.random.default_rng([cfg["seed"], 1])
    frame_rng = np.random.default_rng([cfg["seed"], 2])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params, lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"]) if params else None
    loss_cfg = model.loss_config()
    history: list[dict] = []
    last_good = None
    t0 = time.time()
    for step in range(steps):
        model.train()
        model.set_swa(True)
        model.video_encoder.set_step(cfg["seed"], step)
        batch = build_batch(train, B, vocab, batch_rng)
        recs = [dataset.by_id[v] for v in batch.videos]
        x = clip_tensor(dataset, recs, F_, 1, "train", frame_rng)
        lab = model.label_encoder.encode(list(batch.labels))
        vid = model.video_encoder(x)
        s = model.label_scores(lab, vid)
        loss = batch_loss(s, batch.targets(), loss_cfg)
        if model.video_encoder.T and cfg["temporal.anchor_l2"]:
            loss = loss + model.video_encoder.anchor_penalty()
        if not math.isfinite(loss.item()):
            where = f"; last good checkpoint {last_good}" if last_good else ""
            raise TrainingAborted(f"non-finite loss at step {step}{where}")
        if opt is not None:
            lr = warmup_cosine(step, cfg["train.lr"], cfg["train.warmup"], steps)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        rec = {"step": step + 1, "loss": loss.item()}
        done = step + 1 == steps
        if cfg["train.eval_every"] and ((step + 1) % cfg["train.eval_every"] == 0 or done) and eval_splits:
            rec.update({f"{k}/{m}": v for k, res in evaluate(model, dataset, eval_splits).items()
                        for m, v in res.items()})
            rec["elapsed_s"] = round(time.time() - t0, 3)
        if out and cfg["train.checkpoint_every"] and ((step + 1) % cfg["train.checkpoint_every"] == 0 or done):
            path = out / "checkpoints" / f"step_{step + 1:06d}.ckpt"
            save_checkpoint(model, path)
            last_good = path
        history.append(rec)
        if out and len(rec) > 2:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        if progress:
            progress(rec)
    return model, history


def model_hash(model: Model) -> str:
    return checkpoint_hash(model)
