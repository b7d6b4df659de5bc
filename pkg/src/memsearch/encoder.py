"""Vocabulary, tokenizer and the shared contextual encoder.

The encoder is a deliberately small stand-in for a pre-trained Transformer:
token + learned position embeddings, a stack of self-attention blocks with
residual connections (single head by default), and a final linear map. Each memory level
also owns a randomly initialized word-embedding table that is concatenated to
the contextual states (see :func:`level_input`).
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_tokens(text: str) -> list[tuple[str, int, int]]:
    """Lowercased word/punctuation tokens with their character spans."""
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Vocabulary:
    """Token -> id map; ids are dense in [0, size), 0 is padding and 1 unknown."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str], size: int = 2048, reserved: Sequence[str] = ()) -> "Vocabulary":
        """Most frequent tokens first; ties broken alphabetically."""
        counts = Counter(tok for t in texts for tok, _, _ in split_tokens(t))
        out = [PAD_TOKEN, UNK_TOKEN]
        seen = set(out)
        for tok in reserved:
            for t, _, _ in split_tokens(tok):
                if t not in seen:
                    out.append(t)
                    seen.add(t)
        for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
            if len(out) >= size:
                break
            if tok not in seen:
                out.append(tok)
                seen.add(tok)
        return cls(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


@dataclass
class TokenSequence:
    ids: np.ndarray  # int64, length max_len, padded with PAD_ID
    n_real: int
    truncated: bool
    tokens: list[str]
    spans: list[tuple[int, int]]
    text: str = ""
    role: str = ""
    level: int = 0
    source: str = ""
    # original-token index of each position; identity for whole-word tokens
    word_index: list[int] = field(default_factory=list)

    @property
    def max_len(self) -> int:
        return len(self.ids)

    @property
    def mask(self) -> np.ndarray:
        """True at padded positions."""
        m = np.ones(len(self.ids), dtype=bool)
        m[: self.n_real] = False
        return m


def tokenize(text: str, vocab: Vocabulary, max_len: int, **meta) -> TokenSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks = split_tokens(text)
    truncated = len(toks) > max_len
    toks = toks[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    for i, (t, _, _) in enumerate(toks):
        ids[i] = vocab[t]
    return TokenSequence(
        ids=ids,
        n_real=len(toks),
        truncated=truncated,
        tokens=[t for t, _, _ in toks],
        spans=[(a, b) for _, a, b in toks],
        text=text,
        word_index=list(range(len(toks))),
        **meta,
    )


# ---------------------------------------------------------------------------
# model pieces


@dataclass
class EncoderConfig:
    vocab_size: int = 2048
    d_ctx: int = 32
    d_emb: int = 16
    n_filters: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    ffn_mult: int = 0  # 0 = attention-only blocks
    layer_norm: bool = False
    # attention keys start as a copy of the queries, scaled, so identical
    # tokens attend to each other from the first step; 0 = independent init
    qk_tied_gain: float = 3.0
    max_positions: int = 150
    seed: int = 0

    def __post_init__(self):
        if self.d_ctx % self.n_heads:
            raise ValueError(f"d_ctx={self.d_ctx} not divisible by n_heads={self.n_heads}")
        if self.ffn_mult < 0:
            raise ValueError("ffn_mult must be >= 0")
        if self.qk_tied_gain < 0:
            raise ValueError("qk_tied_gain must be >= 0")


def memory_parameter_count(d_emb: int, d_ctx: int, n_filters: int, vocab_size: int, levels: int = 3) -> int:
    """Memory-layer parameters over all levels: filters plus level word embeddings, biases excluded."""
    return levels * ((d_emb + d_ctx) * n_filters + d_emb * vocab_size)


def _uniform_(t: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * (2 * bound) - bound)


class AttentionBlock(nn.Module):
    """Scaled dot-product self-attention with a residual connection.

    Optional pieces (off by default): multiple heads, a pre-norm LayerNorm and
    a GELU feed-forward sublayer. All are smooth, so finite differences behave.
    """

    def __init__(self, d: int, n_heads: int = 1, ffn_mult: int = 0, layer_norm: bool = False):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))
        self.ln1 = nn.LayerNorm(d) if layer_norm else nn.Identity()
        self.ln2 = nn.LayerNorm(d) if layer_norm and ffn_mult else nn.Identity()
        if ffn_mult:
            self.ff1 = nn.Parameter(torch.empty(d, ffn_mult * d))
            self.ff1_b = nn.Parameter(torch.zeros(ffn_mult * d))
            self.ff2 = nn.Parameter(torch.empty(ffn_mult * d, d))
            self.ff2_b = nn.Parameter(torch.zeros(d))
        else:
            self.ff1 = None

    def reset_parameters(self, gen: torch.Generator, qk_tied_gain: float = 0.0) -> None:
        d = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            _uniform_(w, 1.0 / math.sqrt(d), gen)
        if qk_tied_gain:
            with torch.no_grad():
                self.wk.copy_(self.wq)
                self.wq.mul_(qk_tied_gain)
        if self.ff1 is not None:
            _uniform_(self.ff1, 1.0 / math.sqrt(d), gen)
            _uniform_(self.ff2, 1.0 / math.sqrt(self.ff2.shape[0]), gen)
            with torch.no_grad():
                self.ff1_b.zero_()
                self.ff2_b.zero_()
        for m in (self.ln1, self.ln2):
            if isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.n_heads
        y = self.ln1(x)

        def heads(w):
            return (y @ w).view(b, n, h, d // h).transpose(1, 2)  # (B, h, N, d/h)

        q, k, v = heads(self.wq), heads(self.wk), heads(self.wv)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        # all-padding rows would be NaN; their outputs are overwritten anyway
        attn = torch.nan_to_num(attn, nan=0.0)
        x = x + (attn @ v).transpose(1, 2).reshape(b, n, d) @ self.wo
        if self.ff1 is not None:
            y = self.ln2(x)
            x = x + nn.functional.gelu(y @ self.ff1 + self.ff1_b) @ self.ff2 + self.ff2_b
        return x


class ContextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_ctx
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, d))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_positions, d))
        self.blocks = nn.ModuleList(
            AttentionBlock(d, cfg.n_heads, cfg.ffn_mult, cfg.layer_norm) for _ in range(cfg.n_blocks)
        )
        self.out_w = nn.Parameter(torch.empty(d, d))
        self.out_b = nn.Parameter(torch.zeros(d))
        # designated output at padded positions
        self.register_buffer("pad_state", torch.zeros(d))

    def reset_parameters(self, gen: torch.Generator) -> None:
        _uniform_(self.tok_emb, 1.0, gen)
        _uniform_(self.pos_emb, 0.5, gen)
        for b in self.blocks:
            b.reset_parameters(gen, self.cfg.qk_tied_gain)
        _uniform_(self.out_w, 1.0 / math.sqrt(self.cfg.d_ctx), gen)
        with torch.no_grad():
            self.out_b.zero_()

    def forward(self, ids: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        """ids, pad: (B, N). Returns contextual states (B, N, d_ctx)."""
        if ids.numel() and int(ids.max()) >= self.cfg.vocab_size:
            raise ValueError("token id out of range")
        n = ids.shape[1]
        if n > self.cfg.max_positions:
            raise ValueError(f"sequence length {n} exceeds max_positions")
        x = self.tok_emb[ids] + self.pos_emb[:n][None]
        for blk in self.blocks:
            x = blk(x, pad)
        x = x @ self.out_w + self.out_b
        return torch.where(pad[..., None], self.pad_state.to(x.dtype), x)


def encode(seq: TokenSequence, encoder: ContextEncoder) -> np.ndarray:
    """Contextual states of one sequence as a d_ctx x N matrix."""
    p = next(encoder.parameters())
    with torch.no_grad():
        out = encoder(torch.as_tensor(seq.ids)[None], torch.as_tensor(seq.mask)[None])
    return out[0].T.to(torch.float64).numpy() if p.dtype == torch.float64 else out[0].T.numpy()


def level_input(ctx: np.ndarray, seq: TokenSequence, level: int, embedding: np.ndarray) -> np.ndarray:
    """Stack the level's word embeddings on top of the contextual states: (d_emb + d_ctx) x N."""
    if level not in (1, 2, 3):
        raise ValueError(f"level must be 1, 2 or 3, got {level}")
    if ctx.shape[1] != len(seq.ids):
        raise ValueError("context length does not match sequence")
    emb = np.asarray(embedding)[seq.ids].T
    return np.concatenate([emb, ctx], axis=0)


# ---------------------------------------------------------------------------
# checkpoint file
#
# Layout (little-endian):
#   magic  b"MMCK" | version u32 | vocab_size, d_ctx, d_emb, n_filters,
#   n_blocks, n_heads, ffn_mult, layer_norm, max_positions u32 | seed u64 | n_tensors u32
#   then per tensor: name_len u16, name utf-8, ndim u8, dims u32 x ndim,
#   data f32 row-major.
# Tensors are written in named_parameters() order: encoder.tok_emb,
# encoder.pos_emb, encoder.blocks.{i}.*, encoder.out_w, encoder.out_b, then for each
# level l in 1..3: levels.{l-1}.emb, levels.{l-1}.weight, levels.{l-1}.bias.

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 2
