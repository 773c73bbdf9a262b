"""Label encoders: learnable LLM prompting and the frozen/trainable baselines."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources

import torch
from torch import nn

from .backbones import EOT, Backbones, normalize_text
from .nn.layers import LayerNorm, Linear, SeededModule, TransformerBlock

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Q: What are useful features for distinguishing a {label} in a photo? "
    "A: There are several useful visual features to tell about a {label} in a photo: 1."
)
CLASSNAME_PROMPT = "a video of {label}"
ATTRIBUTE_PROMPT = "{label}, which has {attribute}"

VARIANTS = ("learnable_llm", "fixed_llm", "coop", "dualcoop", "classname", "templates")


def load_templates() -> list[str]:
    text = resources.files("ovmlc.resources").joinpath("video_templates.txt").read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def build_template(tokenizer, label: str) -> list[int]:
    if not label.strip():
        raise ValueError("label must be nonempty")
    return tokenizer.tokenize(PROMPT_TEMPLATE.format(label=label))


_MARKER = re.compile(r"(?:^|\s)\d+\.?(?=\s|$)")


def parse_attribute_list(text: str) -> list[str]:
    """Split a numbered list into items, dropping exact repeats after normalization."""
    items = (normalize_text(x) for x in _MARKER.split(text))
    return list(dict.fromkeys(x for x in items if x))


@dataclass
class SoftAttribute:
    tokens: torch.Tensor  # (L, d_llm)
    prefix_index: int
    chunk_index: int


class PrefixBank(SeededModule):
    def __init__(self, n: int, width: int, seed: int, name="prefixes"):
        super().__init__(seed, name)
        if n < 1:
            raise ValueError("need at least one prefix")
        self.new_param("prefixes", (n, width), scale=1.0)

    def __len__(self):
        return self.prefixes.shape[0]


class PromptTransformer(SeededModule):
    """Maps an (L, d_llm) soft attribute to an (L, d_clip) soft prompt."""

    def __init__(self, d_llm, d_clip, length, n_heads, seed, name="prompt_transformer", depth=2):
        super().__init__(seed, name)
        self.lift = Linear(d_llm, d_clip, seed, f"{name}.lift")
        self.new_param("pos_embedding", (length, d_clip), scale=0.1)
        self.blocks = nn.ModuleList(TransformerBlock(d_clip, n_heads, seed, f"{name}.blocks.{i}")
                                    for i in range(depth))
        self.ln_out = LayerNorm(d_clip, seed, f"{name}.ln_out")

    def forward(self, attrs):
        x = self.lift(attrs) + self.pos_embedding[:attrs.shape[-2]]
        for blk in self.blocks:
            x = blk(x)
        return self.ln_out(x)


def _normalize(z):
    return z / z.norm(dim=-1, keepdim=True)


def mean_pool(feats: torch.Tensor) -> torch.Tensor:
    """Normalized mean over axis -2. Rows are sorted per coordinate first so the
    result is bit-identical under any permutation of the pooled features."""
    return _normalize(torch.sort(feats, dim=-2).values.mean(dim=-2))


class LabelEncoder(nn.Module):
    """``encode(labels)`` returns (n, D) unit vectors, or (n, 2, D) for ``dualcoop``
    (positive and negative prompt embeddings)."""

    def __init__(self, backbones: Backbones, variant="learnable_llm", n_prefixes=4, n_attributes=5,
                 attribute_len=5, context_len=4, seed=0, templates=None):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown label encoder variant {variant!r}")
        # Not registered as a submodule: the owning model holds the backbones once.
        object.__setattr__(self, "backbones", backbones)
        self.variant = variant
        self.K, self.L = int(n_attributes), int(attribute_len)
        cfg = backbones.cfg
        if variant == "learnable_llm":
            if self.K * self.L > cfg.llm_max_steps:
                raise ValueError(f"K*L = {self.K * self.L} exceeds the decoder step budget {cfg.llm_max_steps}")
            self.prefix_bank = PrefixBank(n_prefixes, cfg.d_llm, seed)
            self.prompt_transformer = PromptTransformer(cfg.d_llm, cfg.d_clip, self.L, cfg.n_heads, seed)
        elif variant == "coop":
            self.context = _context(seed, "coop.context", context_len, cfg.d_clip)
        elif variant == "dualcoop":
            self.pos_context = _context(seed, "dualcoop.pos_context", context_len, cfg.d_clip)
            self.neg_context = _context(seed, "dualcoop.neg_context", context_len, cfg.d_clip)
        self.templates = list(templates) if templates is not None else load_templates()
        self._fixed_cache: dict[str, torch.Tensor] = {}
        self.calls = 0

    @property
    def tokenizer(self):
        return self.backbones.tokenizer

    @property
    def text(self):
        return self.backbones.text

    def forward(self, labels):
        return self.encode(labels)

    def encode(self, labels: list[str]) -> torch.Tensor:
        self.calls += len(labels)
        if self.variant == "learnable_llm":
            return self._grouped(labels, self._encode_learnable)
        if self.variant == "coop":
            return self._grouped(labels, lambda g: self._encode_context(g, self.context))
        if self.variant == "dualcoop":
            pos = self._grouped(labels, lambda g: self._encode_context(g, self.pos_context))
            neg = self._grouped(labels, lambda g: self._encode_context(g, self.neg_context))
            return torch.stack([pos, neg], dim=1)
        fn = {"fixed_llm": self.encode_fixed_llm, "classname": self.encode_classname,
              "templates": self.encode_templates}[self.variant]
        return torch.stack([fn(lb) for lb in labels])

    def _grouped(self, labels, fn):
        # Labels with the same word count share sequence lengths and batch together.
        groups: dict[int, list[int]] = {}
        for i, lb in enumerate(labels):
            groups.setdefault(len(self.tokenizer.tokenize(lb)), []).append(i)
        parts, order = [], []
        for idx in groups.values():
            parts.append(fn([labels[i] for i in idx]))
            order.extend(idx)
        out = torch.cat(parts)
        inv = torch.empty(len(order), dtype=torch.long)
        inv[torch.tensor(order)] = torch.arange(len(order))
        return out[inv]

    # learnable LLM prompting

    def soft_attributes(self, labels: list[str]) -> torch.Tensor:
        """(n, N, K, L, d_llm) decoded soft attribute blocks for same-length labels."""
        llm, bank = self.backbones.llm, self.prefix_bank.prefixes
        n, N = len(labels), bank.shape[0]
        ids = torch.tensor([build_template(self.tokenizer, lb) for lb in labels])
        enc = llm.encode(bank.repeat(n, 1), ids.repeat_interleave(N, dim=0))
        dec = llm.decode_continuous(enc, self.K * self.L)
        return dec.reshape(n, N, self.K, self.L, -1)

    def generate_soft_attributes(self, prefix_index: int, label: str) -> list[SoftAttribute]:
        if not 0 <= prefix_index < len(self.prefix_bank):
            raise IndexError(f"prefix index {prefix_index} out of range")
        llm = self.backbones.llm
        enc = llm.encode(self.prefix_bank.prefixes[prefix_index], build_template(self.tokenizer, label))
        dec = llm.decode_continuous(enc, self.K * self.L).reshape(self.K, self.L, -1)
        return [SoftAttribute(dec[k], prefix_index, k) for k in range(self.K)]

    def attribute_features(self, labels: list[str]) -> torch.Tensor:
        """(n, N*K, D) per-attribute text features before pooling."""
        attrs = self.soft_attributes(labels)
        n, N, K, L, _ = attrs.shape
        soft = self.prompt_transformer(attrs.reshape(n * N * K, L, -1))
        lab_ids = [self.tokenizer.tokenize(lb) for lb in labels]
        lab = self.text.embed_tokens(lab_ids).to(soft.dtype).repeat_interleave(N * K, dim=0)
        x = torch.cat([soft, lab], dim=1)
        feats = self.text.encode_embeddings(x, [x.shape[1] - 1] * x.shape[0])
        return feats.reshape(n, N * K, -1)

    def _encode_learnable(self, labels):
        return mean_pool(self.attribute_features(labels))

    # trainable context baselines

    def _encode_context(self, labels, context):
        ids = [self.tokenizer.tokenize(lb) for lb in labels]
        lab = self.text.embed_tokens(ids).to(context.dtype)
        x = torch.cat([context.expand(len(labels), -1, -1), lab], dim=1)
        return self.text.encode_embeddings(x, [x.shape[1] - 1] * x.shape[0])

    # frozen baselines

    def encode_classname(self, label: str) -> torch.Tensor:
        return self.text.encode_text(self.tokenizer.tokenize(CLASSNAME_PROMPT.format(label=label)))

    def encode_templates(self, label: str) -> torch.Tensor:
        seqs = [self.tokenizer.tokenize(t.format(label=label)) for t in self.templates]
        return mean_pool(self.text.encode_batch(seqs))

    def fixed_llm_attributes(self, label: str) -> list[str]:
        llm = self.backbones.llm
        with torch.no_grad():
            enc = llm.encode(None, build_template(self.tokenizer, label))
            text = llm.decode_discrete(enc, self.K * self.L)
        return parse_attribute_list(text)

    def encode_fixed_llm(self, label: str) -> torch.Tensor:
        if label in self._fixed_cache:
            return self._fixed_cache[label]
        attrs = self.fixed_llm_attributes(label)
        if not attrs:
            log.warning("no attributes parsed for %r; falling back to the class-name prompt", label)
            out = self.encode_classname(label)
        else:
            max_len = self.text.cfg.text_max_len
            seqs = [self.tokenizer.tokenize(CLASSNAME_PROMPT.format(label=label))]
            for a in attrs:
                ids = self.tokenizer.tokenize(ATTRIBUTE_PROMPT.format(label=label, attribute=a))
                seqs.append(ids[:max_len - 1] + [EOT] if len(ids) > max_len else ids)
            out = mean_pool(self.text.encode_batch(seqs))
        if not self.text.token_embedding.requires_grad:
            out = out.detach()
            self._fixed_cache[label] = out
        return out


def _context(seed, name, length, width):
    holder = SeededModule(seed, name)
    return holder.new_param("values", (length, width), scale=1.0)


def dualcoop_probability(s_pos, s_neg, tau):
    """Positive component of softmax(s_pos/tau, s_neg/tau)."""
    return torch.softmax(torch.stack([torch.as_tensor(s_pos) / tau, torch.as_tensor(s_neg) / tau]), dim=0)[0]
