"""The shared encoder plus the three level memory layers, and checkpoint I/O."""

from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoder import (
    CKPT_MAGIC,
    CKPT_VERSION,
    ContextEncoder,
    EncoderConfig,
    TokenSequence,
    Vocabulary,
    tokenize,
)
from .memory import MemoryLayer
from .seqformat import DEFAULT_MAX_LEN


class MemoryModel(nn.Module):
    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, max_len: dict[int, int] | None = None):
        super().__init__()
        if len(vocab) > cfg.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} tokens, config allows {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        self.max_len = dict(max_len or DEFAULT_MAX_LEN)
        if max(self.max_len.values()) > cfg.max_positions:
            raise ValueError("level max length exceeds encoder max_positions")
        self.encoder = ContextEncoder(cfg)
        self.levels = nn.ModuleList(
            MemoryLayer(cfg.vocab_size, cfg.d_emb, cfg.d_ctx, cfg.n_filters) for _ in range(3)
        )
        gen = torch.Generator().manual_seed(cfg.seed)
        self.encoder.reset_parameters(gen)
        for lvl in self.levels:
            lvl.reset_parameters(gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.tok_emb.dtype

    def encoder_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters())

    def memory_parameters(self) -> list[nn.Parameter]:
        return list(self.levels.parameters())

    def tokenize(self, text: str, level: int, **meta) -> TokenSequence:
        return tokenize(text, self.vocab, self.max_len[level], level=level, **meta)

    def batch(self, texts: Sequence[str], level: int) -> tuple[torch.Tensor, torch.Tensor]:
        seqs = [self.tokenize(t, level) for t in texts]
        ids = torch.as_tensor(np.stack([s.ids for s in seqs])) if seqs else torch.zeros(0, self.max_len[level], dtype=torch.long)
        return ids, ids == 0

    def forward_level(self, ids: torch.Tensor, pad: torch.Tensor, level: int):
        """Memory vectors for a batch at one level: (g, argmax, H)."""
        ctx = self.encoder(ids, pad)
        return self.levels[level - 1](ctx, ids, pad)

    def memory_vectors(self, texts: Sequence[str], level: int, batch_size: int = 256) -> np.ndarray:
        """Memory vectors (len(texts), M) without gradient tracking, in the model dtype."""
        out = []
        with torch.no_grad():
            for i in range(0, len(texts), batch_size):
                ids, pad = self.batch(texts[i : i + batch_size], level)
                g, _, _ = self.forward_level(ids, pad, level)
                out.append(g.numpy())
        if not out:
            return np.zeros((0, self.cfg.n_filters), dtype=np.float32 if self.dtype == torch.float32 else np.float64)
        return np.concatenate(out)

    # -- identity -----------------------------------------------------------

    def state_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_checkpoint(buf, self)
        return buf.getvalue()

    def checksum(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        """Atomic write: temp file then rename."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            write_checkpoint(f, self)
            f.flush()
            os.fsync(f.fileno())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary, max_len: dict[int, int] | None = None) -> "MemoryModel":
        with open(path, "rb") as f:
            cfg, tensors = read_checkpoint(f)
        model = cls(cfg, vocab, max_len)
        model.load_tensors(tensors)
        return model

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(tensors):
            raise ValueError(f"checkpoint tensors do not match model: {sorted(set(params) ^ set(tensors))}")
        with torch.no_grad():
            for name, p in params.items():
                if tuple(p.shape) != tensors[name].shape:
                    raise ValueError(f"shape mismatch for {name}")
                p.copy_(torch.as_tensor(tensors[name], dtype=p.dtype))

    def copy(self) -> "MemoryModel":
        clone = MemoryModel(self.cfg, self.vocab, self.max_len).to(self.dtype)
        clone.load_state_dict(self.state_dict())
        return clone


_CKPT_HEADER = struct.Struct("<4sI9IQI")


def write_checkpoint(f, model: MemoryModel) -> None:
    cfg = model.cfg
    params = list(model.named_parameters())
    f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, cfg.vocab_size, cfg.d_ctx, cfg.d_emb,
                              cfg.n_filters, cfg.n_blocks, cfg.n_heads, cfg.ffn_mult, int(cfg.layer_norm),
                              cfg.max_positions, cfg.seed, len(params)))
    for name, p in params:
        raw = name.encode()
        arr = p.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_checkpoint(f) -> tuple[EncoderConfig, dict[str, np.ndarray]]:
    head = f.read(_CKPT_HEADER.size)
    if len(head) != _CKPT_HEADER.size:
        raise ValueError("truncated checkpoint header")
    magic, version, v, d_ctx, d_emb, m, nb, nh, ff, ln, mp, seed, n = _CKPT_HEADER.unpack(head)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"not a checkpoint (magic={magic!r}, version={version})")
    cfg = EncoderConfig(vocab_size=v, d_ctx=d_ctx, d_emb=d_emb, n_filters=m, n_blocks=nb,
                        n_heads=nh, ffn_mult=ff, layer_norm=bool(ln), max_positions=mp, seed=seed)
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<H", f.read(2))
        name = f.read(name_len).decode()
        (nd,) = struct.unpack("<B", f.read(1))
        shape = struct.unpack(f"<{nd}I", f.read(4 * nd))
        count = int(np.prod(shape)) if nd else 1
        tensors[name] = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).copy()
    return cfg, tensors
