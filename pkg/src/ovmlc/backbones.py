"""Seeded, frozen stand-ins for the pretrained dual encoder and the encoder-decoder LLM.

None of these models is trained. Token embedding tables carry one piece of
"pretrained knowledge": a synonym word's row is correlated with its canonical
word's row (``synonym_rho``), so open-vocabulary names land near the names the
trainable parts were fitted on.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .nn.layers import LayerNorm, Linear, SeededModule, TransformerBlock, check_finite, freeze
from .nn.rng import derive_seed, seeded_init
from .vocab import WORD_SYNONYMS, default_words

SPECIALS = ("<pad>", "<bos>", "<eot>", "<unk>", "<dec_start>")
PAD, BOS, EOT, UNK, DECODER_START = range(5)

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_text(text: str) -> str:
    return " ".join(_PUNCT.sub("", text.lower()).split())


class Tokenizer:
    """Word-level tokenizer over a closed vocabulary."""

    def __init__(self, words):
        self.words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def default(cls) -> "Tokenizer":
        return cls(default_words())

    def __len__(self):
        return len(self.words)

    def tokenize(self, text: str) -> list[int]:
        return [self.ids.get(w, UNK) for w in normalize_text(text).split()] + [EOT]

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOT:
                break
            if i >= len(SPECIALS):
                out.append(self.words[i])
        return " ".join(out)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for i, w in enumerate(self.words):
                f.write(f"{w}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                w, i = line.rstrip("\n").split("\t")
                rows.append((int(i), w))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ValueError("token ids must be dense")
        words = [w for _, w in rows]
        if tuple(words[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary file does not start with the special tokens")
        return cls(words[len(SPECIALS):])


def knowledge_table(tokenizer: Tokenizer, dim: int, seed: int, name: str, rho: float,
                    synonyms=WORD_SYNONYMS) -> np.ndarray:
    """Embedding table with synonym rows correlated (``rho``) to their canonical rows."""
    table = seeded_init((len(tokenizer), dim), derive_seed(seed, name), scale=1.0)
    for syn, canon in synonyms.items():
        if syn in tokenizer.ids and canon in tokenizer.ids:
            s, c = tokenizer.ids[syn], tokenizer.ids[canon]
            table[s] = rho * table[c] + np.sqrt(1 - rho ** 2) * table[s]
    return table


@dataclass
class BackboneConfig:
    d_llm: int = 32
    d_clip: int = 48
    d_vis: int = 48
    joint_dim: int = 32
    text_layers: int = 3
    vision_layers: int = 6
    llm_encoder_layers: int = 2
    llm_decoder_layers: int = 2
    n_heads: int = 4
    grid: int = 4
    patch_channels: int = 8
    text_max_len: int = 32
    llm_max_len: int = 48
    llm_max_steps: int = 32
    synonym_rho: float = 0.8
    seed: int = 0


class ToyTextEncoder(SeededModule):
    """Causal text transformer pooled at the EOT position, projected and normalized."""

    def __init__(self, tokenizer: Tokenizer, cfg: BackboneConfig):
        super().__init__(cfg.seed, "clip_text")
        self.cfg = cfg
        d = cfg.d_clip
        self.token_embedding = nn.Parameter(torch.from_numpy(
            knowledge_table(tokenizer, d, cfg.seed, "clip_text.token_embedding", cfg.synonym_rho)))
        self.new_param("pos_embedding", (cfg.text_max_len, d), scale=0.1)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.seed, f"clip_text.blocks.{i}", causal=True)
            for i in range(cfg.text_layers))
        self.ln_final = LayerNorm(d, cfg.seed, "clip_text.ln_final")
        self.proj = Linear(d, cfg.joint_dim, cfg.seed, "clip_text.proj", bias=False)
        freeze(self)

    @property
    def width(self):
        return self.cfg.d_clip

    def embed_tokens(self, ids) -> torch.Tensor:
        return self.token_embedding[torch.as_tensor(ids, dtype=torch.long)]

    def encode_embeddings(self, x: torch.Tensor, eot_index) -> torch.Tensor:
        """``x``: (B, S, d) token embeddings; ``eot_index``: (B,) pooling positions."""
        s = x.shape[-2]
        if s > self.cfg.text_max_len:
            raise ValueError(f"sequence length {s} exceeds max {self.cfg.text_max_len}")
        h = x + self.pos_embedding[:s]
        for blk in self.blocks:
            h = blk(h)
        idx = torch.as_tensor(eot_index, dtype=torch.long)
        pooled = h[torch.arange(h.shape[0]), idx]
        z = self.proj(self.ln_final(pooled))
        return z / z.norm(dim=-1, keepdim=True)

    def encode_text(self, ids) -> torch.Tensor:
        """Single sequence (list of ids) -> (D,), or a list of sequences -> (B, D)."""
        single = len(ids) == 0 or not isinstance(ids[0], (list, tuple, np.ndarray))
        seqs = [list(ids)] if single else [list(s) for s in ids]
        out = self.encode_batch(seqs)
        return out[0] if single else out

    def encode_batch(self, seqs: list[list[int]]) -> torch.Tensor:
        lengths = [len(s) for s in seqs]
        if max(lengths) > self.cfg.text_max_len:
            raise ValueError(f"sequence length {max(lengths)} exceeds max {self.cfg.text_max_len}")
        width = max(lengths)
        padded = [s + [PAD] * (width - len(s)) for s in seqs]
        x = self.embed_tokens(padded)
        return self.encode_embeddings(x, [n - 1 for n in lengths])

    def encode_text_soft(self, soft_prompt: torch.Tensor, label_ids) -> torch.Tensor:
        """Soft prompt rows (P, d) or (B, P, d) injected ahead of the embedded label tokens."""
        if soft_prompt.shape[-1] != self.cfg.d_clip:
            raise ValueError(f"soft prompt width {soft_prompt.shape[-1]} != text width {self.cfg.d_clip}")
        single = soft_prompt.dim() == 2
        soft = soft_prompt.unsqueeze(0) if single else soft_prompt
        lab = self.embed_tokens(list(label_ids)).to(soft.dtype)
        lab = lab.unsqueeze(0).expand(soft.shape[0], -1, -1)
        x = torch.cat([soft, lab], dim=1)
        out = self.encode_embeddings(x, [x.shape[1] - 1] * x.shape[0])
        return out[0] if single else out


class ToyVisionBackbone(SeededModule):
    """ViT over a G x G grid of patch vectors with per-layer activation taps."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg.seed, "clip_vision")
        self.cfg = cfg
        d, n_tok = cfg.d_vis, 1 + cfg.grid ** 2
        self.patch_embed = Linear(cfg.patch_channels, d, cfg.seed, "clip_vision.patch_embed")
        self.new_param("cls", (d,), scale=1.0)
        self.new_param("pos_embedding", (n_tok, d), scale=0.1)
        self.ln_pre = LayerNorm(d, cfg.seed, "clip_vision.ln_pre")
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.seed, f"clip_vision.blocks.{i}")
            for i in range(cfg.vision_layers))
        self.ln_post = LayerNorm(d, cfg.seed, "clip_vision.ln_post")
        self.proj = Linear(d, cfg.joint_dim, cfg.seed, "clip_vision.proj", bias=False)
        freeze(self)

    def taps(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """``frames``: (..., G, G, C). Returns S+1 arrays of shape (..., 1+G^2, d):
        index 0 is the block input, index l the output of layer l."""
        g, c = self.cfg.grid, self.cfg.patch_channels
        if tuple(frames.shape[-3:]) != (g, g, c):
            raise ValueError(f"frame shape {tuple(frames.shape[-3:])} != {(g, g, c)}")
        lead = frames.shape[:-3]
        x = self.patch_embed(frames.reshape(*lead, g * g, c))
        cls = self.cls.expand(*lead, 1, -1).to(x.dtype)
        x = self.ln_pre(torch.cat([cls, x], dim=-2) + self.pos_embedding)
        out = [x]
        for blk in self.blocks:
            x = blk(x)
            out.append(x)
        return out

    def project(self, cls_tokens: torch.Tensor) -> torch.Tensor:
        """Unnormalized joint-space projection of CLS-like tokens."""
        return self.proj(self.ln_post(cls_tokens))

    def encode_frame(self, frame: torch.Tensor):
        """Returns (taps for layers 1..S, unit-norm frame embedding)."""
        taps = self.taps(frame)
        z = self.project(taps[-1][..., 0, :])
        return taps[1:], z / z.norm(dim=-1, keepdim=True)


class ToyEncDecLLM(SeededModule):
    """Encoder-decoder transformer with a tied output head."""

    def __init__(self, tokenizer: Tokenizer, cfg: BackboneConfig):
        super().__init__(cfg.seed, "llm")
        self.cfg = cfg
        self.tokenizer = tokenizer
        d = cfg.d_llm
        self.token_embedding = nn.Parameter(torch.from_numpy(
            knowledge_table(tokenizer, d, cfg.seed, "llm.token_embedding", cfg.synonym_rho)))
        self.new_param("enc_pos", (cfg.llm_max_len, d), scale=0.1)
        self.new_param("dec_pos", (cfg.llm_max_steps, d), scale=0.1)
        self.encoder = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.seed, f"llm.encoder.{i}") for i in range(cfg.llm_encoder_layers))
        self.ln_enc = LayerNorm(d, cfg.seed, "llm.ln_enc")
        self.decoder = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.seed, f"llm.decoder.{i}", causal=True, cross=True)
            for i in range(cfg.llm_decoder_layers))
        self.ln_dec = LayerNorm(d, cfg.seed, "llm.ln_dec")
        freeze(self)

    @property
    def width(self):
        return self.cfg.d_llm

    def encode(self, prefix: torch.Tensor | None, template_ids) -> torch.Tensor:
        """``prefix``: (d,), (B, d) or None; ``template_ids``: M ids or (B, M).

        Returns (…, 1+M, d) encoder states, prefix at position 0 (M states without prefix).
        """
        ids = torch.as_tensor(template_ids, dtype=torch.long)
        if prefix is None:
            single = ids.dim() == 1
            x = self.token_embedding[ids.unsqueeze(0) if single else ids]
        else:
            if prefix.shape[-1] != self.cfg.d_llm:
                raise ValueError(f"prefix width {prefix.shape[-1]} != LLM width {self.cfg.d_llm}")
            single = prefix.dim() == 1
            p = prefix.unsqueeze(0) if single else prefix
            if ids.dim() == 1:
                ids = ids.unsqueeze(0).expand(p.shape[0], -1)
            tok = self.token_embedding[ids].to(p.dtype)
            x = torch.cat([p.unsqueeze(1), tok], dim=1)
        if x.shape[1] > self.cfg.llm_max_len:
            raise ValueError(f"LLM input length {x.shape[1]} exceeds max {self.cfg.llm_max_len}")
        x = x + self.enc_pos[:x.shape[1]]
        for blk in self.encoder:
            x = blk(x)
        x = self.ln_enc(x)
        return x[0] if single else x

    def _start_decoder(self, enc: torch.Tensor):
        caches = [{} for _ in self.decoder]
        cross = [blk.cross.step_kv(enc) for blk in self.decoder]
        return caches, cross

    def _decoder_step(self, x: torch.Tensor, pos: int, caches, cross) -> torch.Tensor:
        h = x + self.dec_pos[pos]
        for blk, cache, kv in zip(self.decoder, caches, cross):
            h = blk.forward_step(h, cache, kv)
        return self.ln_dec(h)

    def decode_continuous(self, enc: torch.Tensor, steps: int) -> torch.Tensor:
        """Feed each output hidden state back as the next input embedding.

        Returns (…, steps, d); fully differentiable w.r.t. ``enc``.
        """
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if steps > self.cfg.llm_max_steps:
            raise ValueError(f"steps {steps} exceeds max {self.cfg.llm_max_steps}")
        single = enc.dim() == 2
        e = enc.unsqueeze(0) if single else enc
        caches, cross = self._start_decoder(e)
        x = self.token_embedding[DECODER_START].to(e.dtype).expand(e.shape[0], -1)
        outs = []
        for t in range(steps):
            x = self._decoder_step(x, t, caches, cross)
            outs.append(x)
        out = torch.stack(outs, dim=1)
        check_finite(out, "llm.decoder")
        return out[0] if single else out

    def logits(self, states: torch.Tensor) -> torch.Tensor:
        return states @ self.token_embedding.to(states.dtype).T

    @torch.no_grad()
    def decode_discrete(self, enc: torch.Tensor, max_steps: int) -> str:
        """Greedy argmax decoding of a single sequence, detokenized."""
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        e = enc.unsqueeze(0) if enc.dim() == 2 else enc
        banned = torch.tensor([PAD, BOS, UNK, DECODER_START])
        caches, cross = self._start_decoder(e)
        x = self.token_embedding[DECODER_START].to(e.dtype).view(1, -1)
        ids = []
        for t in range(min(max_steps, self.cfg.llm_max_steps)):
            logits = self.logits(self._decoder_step(x, t, caches, cross))[0]
            logits[banned] = float("-inf")
            tok = int(torch.argmax(logits))
            if tok == EOT:
                break
            ids.append(tok)
            x = self.token_embedding[tok].to(e.dtype).view(1, -1)
        return self.tokenizer.detokenize(ids)


class Backbones(nn.Module):
    """Container for the three frozen models sharing one tokenizer."""

    def __init__(self, cfg: BackboneConfig | None = None, tokenizer: Tokenizer | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        self.tokenizer = tokenizer or Tokenizer.default()
        self.text = ToyTextEncoder(self.tokenizer, self.cfg)
        self.vision = ToyVisionBackbone(self.cfg)
        self.llm = ToyEncDecLLM(self.tokenizer, self.cfg)
