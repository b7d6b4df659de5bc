"""Width-1 convolutional memory layers, max-pooled memory vectors and distances.

The numpy functions here are the reference semantics; :class:`MemoryLayer`
is the differentiable torch counterpart used by the model. Both pool only
over non-padded positions and break max ties toward the first position.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


@dataclass
class FeatureMaps:
    H: np.ndarray  # M x N
    pad: np.ndarray  # N, True where padded

    @property
    def n_filters(self) -> int:
        return self.H.shape[0]


@dataclass
class MemoryVector:
    g: np.ndarray
    argmax: np.ndarray
    level: int = 0
    seq_id: int = -1


@dataclass
class DifferenceVector:
    delta: np.ndarray
    query_id: int = -1
    support_id: int = -1
    level: int = 0


def feature_maps(x: np.ndarray, W: np.ndarray, b: np.ndarray, pad: np.ndarray | None = None) -> FeatureMaps:
    """Apply M width-1 filters to every column of the D x N input."""
    if W.shape[1] != x.shape[0] or b.shape != (W.shape[0],):
        raise ValueError(f"filter bank {W.shape} / bias {b.shape} does not match input {x.shape}")
    pad = np.zeros(x.shape[1], dtype=bool) if pad is None else np.asarray(pad, dtype=bool)
    return FeatureMaps(W @ x + b[:, None], pad)


def memory_vector(fm: FeatureMaps, level: int = 0, seq_id: int = -1) -> MemoryVector:
    """Max over non-padded positions per filter; argmax is the first maximal position."""
    real = np.flatnonzero(~fm.pad)
    if real.size == 0:
        raise ValueError("cannot pool a fully padded sequence")
    sub = fm.H[:, real]
    j = np.argmax(sub, axis=1)  # numpy returns the first occurrence
    return MemoryVector(sub[np.arange(sub.shape[0]), j], real[j], level, seq_id)


def _check_pair(a: MemoryVector, b: MemoryVector) -> None:
    if a.g.shape != b.g.shape:
        raise ValueError(f"memory vector sizes differ: {a.g.shape} vs {b.g.shape}")
    if a.level and b.level and a.level != b.level:
        raise ValueError(f"memory vectors from different levels: {a.level} vs {b.level}")


def difference(gq: MemoryVector, gs: MemoryVector) -> DifferenceVector:
    _check_pair(gq, gs)
    delta = np.abs(np.asarray(gq.g, dtype=np.float64) - np.asarray(gs.g, dtype=np.float64))
    return DifferenceVector(delta, gq.seq_id, gs.seq_id, gq.level or gs.level)


def squared_distances(q: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from q to each row of S, in float64.

    Accumulates filter by filter so every row's value is independent of how
    rows are batched or chunked.
    """
    S = np.asarray(S)
    q = np.asarray(q, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != q.shape[0]:
        raise ValueError(f"store shape {S.shape} does not match query {q.shape}")
    acc = np.zeros(S.shape[0], dtype=np.float64)
    for m in range(q.shape[0]):
        d = S[:, m].astype(np.float64) - q[m]
        acc += d * d
    return acc


def distances(q: np.ndarray, S: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_distances(q, S))


def euclidean(gq: MemoryVector, gs: MemoryVector) -> float:
    _check_pair(gq, gs)
    return float(distances(gq.g, np.asarray(gs.g)[None])[0])


class MemoryLayer(nn.Module):
    """One level: word embeddings, M width-1 filters over [emb; ctx], masked max-pool."""

    def __init__(self, vocab_size: int, d_emb: int, d_ctx: int, n_filters: int):
        super().__init__()
        self.emb = nn.Parameter(torch.empty(vocab_size, d_emb))
        self.weight = nn.Parameter(torch.empty(n_filters, d_emb + d_ctx))
        self.bias = nn.Parameter(torch.zeros(n_filters))

    def reset_parameters(self, gen: torch.Generator) -> None:
        from .encoder import _uniform_

        _uniform_(self.emb, 0.05, gen)
        _uniform_(self.weight, 1.0 / np.sqrt(self.weight.shape[1]), gen)
        with torch.no_grad():
            self.bias.zero_()

    def level_input(self, ctx: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """(B, N, d_emb + d_ctx); the embedding block comes first."""
        return torch.cat([self.emb[ids], ctx], dim=-1)

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight.T + self.bias  # (B, N, M)

    def forward(self, ctx: torch.Tensor, ids: torch.Tensor, pad: torch.Tensor):
        """Returns (g, argmax, H) with g (B, M) and argmax (B, M) positions."""
        H = self.feature_maps(self.level_input(ctx, ids))
        with torch.no_grad():
            masked = H.masked_fill(pad[..., None], float("-inf"))
            # torch.argmax returns the first maximal index
            idx = masked.argmax(dim=1)
        g = H.gather(1, idx[:, None, :]).squeeze(1)
        return g, idx, H


# ---------------------------------------------------------------------------
# memory-store cache file
#
# header: magic b"MMST" | version u32 | level u32 | M u32 | count u64
# records: sequence id i64 | g f32 x M   (little-endian)

CACHE_MAGIC = b"MMST"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


class CacheVersionError(ValueError):
    pass


def _record_dtype(m: int) -> np.dtype:
    return np.dtype([("id", "<i8"), ("g", "<f4", (m,))])


def write_memory_cache(path: str | Path, level: int, ids: np.ndarray, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    ids = np.asarray(ids, dtype=np.int64)
    n, m = vectors.shape
    rec = np.empty(n, dtype=_record_dtype(m))
    rec["id"] = ids
    rec["g"] = vectors
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, level, m, n))
        f.write(rec.tobytes())
    tmp.replace(path)


def read_memory_cache(path: str | Path) -> tuple[int, np.ndarray, np.ndarray]:
    """Returns (level, ids, vectors). Raises CacheVersionError on a foreign or stale file."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CacheVersionError(f"{path}: truncated header")
        magic, version, level, m, n = _HEADER.unpack(head)
        if magic != CACHE_MAGIC or version != CACHE_VERSION:
            raise CacheVersionError(f"{path}: magic/version {magic!r}/{version} not supported")
        rec = np.frombuffer(f.read(), dtype=_record_dtype(m))
    if len(rec) != n:
        raise CacheVersionError(f"{path}: expected {n} records, found {len(rec)}")
    return level, rec["id"].copy(), rec["g"].copy()
