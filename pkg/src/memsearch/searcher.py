"""Coarse-to-fine search over the three memory levels.

Level 1 bi-encodes every candidate sentence once and keeps the ``k1`` nearest
to the claim query. Level 2 cross-encodes the claim with each survivor and
keeps the ``z`` nearest. Level 3 builds one support per label from the claim
and the deduplicated level-2 evidence and picks the nearest label.
All k-NN is exact; distances are computed chunk by chunk with a
deterministic merge.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import LABELS, ClaimRecord, EvidencePointer, Label, WikiStore
from .memory import CacheVersionError, distances, read_memory_cache, write_memory_cache
from .model import MemoryModel
from .seqformat import dedup_evidence, format_query, format_support

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    k1: int = 10
    z: int = 3
    chunk_size: int = 8192
    cache_dir: str | None = None
    max_evidence: int = 5

    def __post_init__(self):
        if self.k1 < 1 or self.z < 1 or self.chunk_size < 1:
            raise ValueError("k1, z and chunk_size must be positive")
        if self.z > self.k1:
            raise ValueError(f"z={self.z} exceeds k1={self.k1}")


@dataclass
class BeamEntry:
    support_id: int
    distance: float
    rank: int
    pointer: EvidencePointer | None = None


def topk(
    query: np.ndarray, vectors: np.ndarray, k: int, ids: np.ndarray | None = None, chunk_size: int = 8192
) -> list[BeamEntry]:
    """The k nearest rows of ``vectors`` to ``query``; ties go to the smaller id."""
    n = len(vectors)
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    best_d = np.zeros(0)
    best_i = np.zeros(0, dtype=np.int64)
    for start in range(0, n, chunk_size):
        d = distances(query, vectors[start : start + chunk_size])
        cand_d = np.concatenate([best_d, d])
        cand_i = np.concatenate([best_i, ids[start : start + chunk_size]])
        order = np.lexsort((cand_i, cand_d))[:k]
        best_d, best_i = cand_d[order], cand_i[order]
    return [BeamEntry(int(i), float(d), r) for r, (i, d) in enumerate(zip(best_i, best_d))]


@dataclass
class MemoryStore:
    """Level-1 memory vectors for a fixed list of sentences, addressed by row."""

    pointers: list[EvidencePointer]
    vectors: np.ndarray
    row: dict[EvidencePointer, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.row:
            self.row = {p: i for i, p in enumerate(self.pointers)}

    def __len__(self) -> int:
        return len(self.pointers)


class Level1Encoder:
    """Encodes level-1 support sentences once per model state and reuses them.

    Keyed by support text, so sentences shared between claims (or identical
    across datastore views) are encoded a single time. ``encode_count`` counts
    sequences actually pushed through the model.
    """

    def __init__(self, model: MemoryModel, cache_dir: str | Path | None = None):
        self.model = model
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.model_checksum = model.checksum()
        self._vec: dict[str, np.ndarray] = {}
        self.encode_count = 0

    def _check_model(self) -> None:
        ck = self.model.checksum()
        if ck != self.model_checksum:
            self._vec.clear()
            self.model_checksum = ck

    def vectors(self, texts: Sequence[str]) -> np.ndarray:
        self._check_model()
        missing = sorted({t for t in texts if t not in self._vec})
        if missing:
            vecs = self.model.memory_vectors(missing, 1)
            self.encode_count += len(missing)
            self._vec.update(zip(missing, vecs))
        if not texts:
            return np.zeros((0, self.model.cfg.n_filters), dtype=np.float32)
        return np.stack([self._vec[t] for t in texts])

    def build(self, pointers: Sequence[EvidencePointer], store: WikiStore) -> MemoryStore:
        texts = [level1_text(p, store, self.model.max_len[1]) for p in pointers]
        if self.cache_dir is None or not texts:
            return MemoryStore(list(pointers), self.vectors(texts))
        self._check_model()
        corpus_ck = hashlib.sha256("\n".join(texts).encode()).hexdigest()
        path = self.cache_dir / f"l1-{self.model_checksum[:16]}-{corpus_ck[:16]}.mms"
        if path.exists():
            try:
                level, ids, vecs = read_memory_cache(path)
                if level == 1 and len(ids) == len(texts) and np.array_equal(ids, np.arange(len(texts))):
                    self._vec.update(zip(texts, vecs))
                    return MemoryStore(list(pointers), vecs)
                log.info("cache %s does not match; rebuilding", path)
            except CacheVersionError as e:
                log.info("rebuilding cache: %s", e)
        vecs = self.vectors(texts)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        write_memory_cache(path, 1, np.arange(len(texts)), vecs)
        return MemoryStore(list(pointers), vecs)


def level1_text(ptr: EvidencePointer, store: WikiStore, max_tokens: int | None = None) -> str:
    dummy = ClaimRecord(-1, "", Label.UNVERIFIABLE)
    return format_support(1, dummy, [(ptr, store.text(ptr))], max_tokens=max_tokens).text


def build_level1_store(
    pointers: Sequence[EvidencePointer], store: WikiStore, model: MemoryModel, cache_dir: str | None = None
) -> MemoryStore:
    return Level1Encoder(model, cache_dir).build(pointers, store)


@dataclass
class SearchTrace:
    claim_id: int
    level1: list[BeamEntry]
    level2: list[BeamEntry]  # every level-1 survivor, re-scored
    level3: dict[Label, float]
    selected_label: Label
    selected_evidence: list[EvidencePointer]
    level2_distance: float  # top of the level-2 beam; inf with no candidates
    level3_distance: float
    delta2: np.ndarray | None = None
    delta3: np.ndarray | None = None
    null_retrieval: bool = False
    z: int = 0

    @property
    def level2_top(self) -> list[BeamEntry]:
        return self.level2[: self.z]

    def to_json(self, include_vectors: bool = True) -> str:
        def beam(b):
            return [[e.pointer.page_title, e.pointer.sentence_index, e.distance] for e in b]

        obj = {
            "claim_id": self.claim_id,
            "level1": beam(self.level1),
            "level2": beam(self.level2),
            "z": self.z,
            "level3": {lab.value: d for lab, d in self.level3.items()},
            "selected_label": self.selected_label.value,
            "selected_evidence": [p.as_list() for p in self.selected_evidence],
            "level2_distance": None if np.isinf(self.level2_distance) else self.level2_distance,
            "level3_distance": self.level3_distance,
            "null_retrieval": self.null_retrieval,
        }
        if include_vectors:
            obj["delta2"] = None if self.delta2 is None else [float(x) for x in self.delta2]
            obj["delta3"] = None if self.delta3 is None else [float(x) for x in self.delta3]
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SearchTrace":
        o = json.loads(line)

        def beam(rows):
            return [BeamEntry(-1, d, r, EvidencePointer(t, i)) for r, (t, i, d) in enumerate(rows)]

        d2 = o.get("delta2")
        d3 = o.get("delta3")
        return cls(
            claim_id=o["claim_id"],
            level1=beam(o["level1"]),
            level2=beam(o["level2"]),
            level3={Label(k): v for k, v in o["level3"].items()},
            selected_label=Label(o["selected_label"]),
            selected_evidence=[EvidencePointer(t, i) for t, i in o["selected_evidence"]],
            level2_distance=float("inf") if o["level2_distance"] is None else o["level2_distance"],
            level3_distance=o["level3_distance"],
            delta2=None if d2 is None else np.asarray(d2),
            delta3=None if d3 is None else np.asarray(d3),
            null_retrieval=o["null_retrieval"],
            z=o["z"],
        )


def write_traces(traces: Iterable[SearchTrace], path: str | Path, include_vectors: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in traces:
            f.write(t.to_json(include_vectors) + "\n")


def read_traces(path: str | Path) -> list[SearchTrace]:
    with open(path, encoding="utf-8") as f:
        return [SearchTrace.from_json(line) for line in f if line.strip()]


def select_label(level3: dict[Label, float]) -> Label:
    """Nearest label; equal distances resolve in Supports, Refutes, Unverifiable order."""
    return min(LABELS, key=lambda lab: (level3[lab], LABELS.index(lab)))


def search_many(
    claims: Sequence[ClaimRecord],
    candidates: Sequence[Sequence[EvidencePointer]],
    store: WikiStore,
    model: MemoryModel,
    cfg: SearchConfig,
    level1: Level1Encoder | None = None,
) -> list[SearchTrace]:
    """Run the search for many claims, batching each level across claims."""
    if len(claims) != len(candidates):
        raise ValueError("claims and candidate lists differ in length")
    level1 = level1 or Level1Encoder(model, cfg.cache_dir)
    max_len = model.max_len

    # level 1
    union = sorted({p for cands in candidates for p in cands})
    mem = level1.build(union, store)
    q1 = model.memory_vectors([format_query(c, 1).text for c in claims], 1)
    beams1 = []
    for c, cands, q in zip(claims, candidates, q1):
        rows = np.array(sorted(mem.row[p] for p in set(cands)), dtype=np.int64)
        if rows.size == 0:
            beams1.append([])
            continue
        beam = topk(q, mem.vectors[rows], cfg.k1, ids=rows, chunk_size=cfg.chunk_size)
        for e in beam:
            e.pointer = mem.pointers[e.support_id]
        beams1.append(beam)

    # level 2
    texts2, owner = [], []
    for i, (c, beam) in enumerate(zip(claims, beams1)):
        for e in beam:
            texts2.append(format_support(2, c, [(e.pointer, store.text(e.pointer))], max_tokens=max_len[2]).text)
            owner.append(i)
    s2 = model.memory_vectors(texts2, 2)
    q2 = model.memory_vectors([format_query(c, 2).text for c in claims], 2)
    beams2, off = [], 0
    for i, beam in enumerate(beams1):
        n = len(beam)
        ids = np.array([e.support_id for e in beam], dtype=np.int64)
        block = s2[off : off + n]
        b2 = topk(q2[i], block, n, ids=ids, chunk_size=cfg.chunk_size) if n else []
        by_id = {e.support_id: e.pointer for e in beam}
        row_of = {e.support_id: j for j, e in enumerate(beam)}
        for e in b2:
            e.pointer = by_id[e.support_id]
        beams2.append((b2, block, row_of))
        off += n

    # level 3
    texts3 = []
    evid = []
    for c, (b2, _, _) in zip(claims, beams2):
        ev = dedup_evidence(e.pointer for e in b2[: cfg.z])
        evid.append(ev)
        pairs = [(p, store.text(p)) for p in ev]
        for lab in LABELS:
            texts3.append(format_support(3, c, pairs, label=lab, max_tokens=max_len[3]).text)
    s3 = model.memory_vectors(texts3, 3)
    q3 = model.memory_vectors([format_query(c, 3).text for c in claims], 3)

    traces = []
    for i, c in enumerate(claims):
        b2, block, row_of = beams2[i]
        d3 = distances(q3[i], s3[3 * i : 3 * i + 3])
        level3 = {lab: float(d) for lab, d in zip(LABELS, d3)}
        sel = select_label(level3)
        delta3 = np.abs(q3[i].astype(np.float64) - s3[3 * i + LABELS.index(sel)].astype(np.float64))
        if b2:
            top = block[row_of[b2[0].support_id]]
            delta2 = np.abs(q2[i].astype(np.float64) - top.astype(np.float64))
            d2 = b2[0].distance
        else:
            delta2, d2 = None, float("inf")
        traces.append(
            SearchTrace(
                claim_id=c.claim_id,
                level1=beams1[i],
                level2=b2,
                level3=level3,
                selected_label=sel,
                selected_evidence=evid[i][: cfg.max_evidence],
                level2_distance=d2,
                level3_distance=level3[sel],
                delta2=delta2,
                delta3=delta3,
                null_retrieval=not b2,
                z=cfg.z,
            )
        )
    return traces


def run_search(
    claim: ClaimRecord,
    candidates: Sequence[EvidencePointer],
    store: WikiStore,
    model: MemoryModel,
    cfg: SearchConfig,
) -> SearchTrace:
    return search_many([claim], [candidates], store, model, cfg)[0]
