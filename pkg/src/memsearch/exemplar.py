"""Exemplar auditing over concatenated level-2/level-3 difference vectors.

The database is separate from the search memories. Vectors are stored in
float32 (the memory-cache layout) and queries are rounded to float32 before
matching, so a stored vector matched against itself is at distance 0 exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Label
from .evaluator import Prediction, _gold_map
from .memory import read_memory_cache, squared_distances, write_memory_cache
from .searcher import SearchTrace

EXEMPLAR_LEVEL_TAG = 23  # stored in the cache header's level field


@dataclass(frozen=True)
class ExemplarRecord:
    vector: np.ndarray = field(repr=False)
    claim_id: int
    predicted: Label
    reference: Label
    partition: str = "train"

    @property
    def is_true_positive(self) -> bool:
        return self.predicted is self.reference


def exemplar_vector(trace: SearchTrace) -> np.ndarray:
    """concat(level-2 top-of-beam delta, level-3 selected-label delta)."""
    if trace.delta2 is None or trace.delta3 is None:
        raise ValueError(f"trace for claim {trace.claim_id} carries no difference vectors")
    return np.concatenate([trace.delta2, trace.delta3]).astype(np.float32)


class ExemplarDB:
    """Append-only flat exemplar store with exact Euclidean matching."""

    def __init__(self, n_filters: int):
        if n_filters < 1:
            raise ValueError("n_filters must be positive")
        self.n_filters = n_filters
        self._vectors: list[np.ndarray] = []
        self.records: list[ExemplarRecord] = []
        self._matrix: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return 2 * self.n_filters

    def __len__(self) -> int:
        return len(self.records)

    def add(self, vector: np.ndarray, claim_id: int, predicted: Label, reference: Label, partition: str) -> None:
        v = np.asarray(vector, dtype=np.float32)
        if v.shape != (self.dim,):
            raise ValueError(f"exemplar vector has shape {v.shape}, database expects ({self.dim},)")
        self.records.append(ExemplarRecord(v, claim_id, predicted, reference, partition))
        self._vectors.append(v)
        self._matrix = None

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack(self._vectors) if self._vectors else np.zeros((0, self.dim), np.float32)
        return self._matrix

    def partitions(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.partition] = out.get(r.partition, 0) + 1
        return out

    def checksum(self) -> str:
        h = hashlib.sha256(f"exemplar-db M={self.n_filters} n={len(self)}\n".encode())
        h.update(self.matrix().astype("<f4").tobytes())
        for r in self.records:
            h.update(f"{r.claim_id}\t{r.predicted.value}\t{r.reference.value}\t{r.partition}\n".encode())
        return h.hexdigest()

    def nearest(self, query: np.ndarray, partition: str | None = None) -> tuple[ExemplarRecord, float]:
        """Exact nearest record; ties go to the earliest inserted."""
        q = np.asarray(query, dtype=np.float32)
        if q.shape != (self.dim,):
            raise ValueError(f"query has shape {q.shape}, database expects ({self.dim},)")
        rows = np.arange(len(self.records))
        if partition is not None:
            rows = np.array([i for i, r in enumerate(self.records) if r.partition == partition], dtype=np.int64)
        if rows.size == 0:
            raise LookupError("no exemplars to match" + (f" in partition {partition!r}" if partition else ""))
        d2 = squared_distances(q, self.matrix()[rows])
        j = int(np.argmin(d2))  # first minimum = insertion order
        return self.records[int(rows[j])], math.sqrt(float(d2[j]))

    # -- persistence: memory-cache binary + JSON-lines sidecar -------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        write_memory_cache(path, EXEMPLAR_LEVEL_TAG, np.arange(len(self)), self.matrix())
        with open(_sidecar(path), "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps({"n_filters": self.n_filters, "count": len(self), "checksum": self.checksum()}) + "\n")
            for r in self.records:
                f.write(json.dumps({"claim_id": r.claim_id, "predicted": r.predicted.value,
                                    "reference": r.reference.value, "partition": r.partition}) + "\n")

    @classmethod
    def load(cls, path: str | Path, n_filters: int | None = None) -> "ExemplarDB":
        path = Path(path)
        level, _, vecs = read_memory_cache(path)
        if level != EXEMPLAR_LEVEL_TAG:
            raise ValueError(f"{path} is a level-{level} memory cache, not an exemplar database")
        with open(_sidecar(path), encoding="utf-8") as f:
            head = json.loads(f.readline())
            meta = [json.loads(line) for line in f if line.strip()]
        if n_filters is not None and head["n_filters"] != n_filters:
            raise ValueError(f"exemplar database built with M={head['n_filters']}, model has M={n_filters}")
        if len(meta) != len(vecs) or vecs.shape[1] != 2 * head["n_filters"]:
            raise ValueError(f"{path}: vector file and sidecar disagree")
        db = cls(head["n_filters"])
        for v, m in zip(vecs, meta):
            db.add(v, m["claim_id"], Label(m["predicted"]), Label(m["reference"]), m["partition"])
        if db.checksum() != head["checksum"]:
            raise ValueError(f"{path}: checksum mismatch")
        return db


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".jsonl")


def build_db(
    traces: Sequence[SearchTrace],
    gold,
    n_filters: int,
    partition: str = "train",
    verifiable_only: bool = True,
    db: ExemplarDB | None = None,
) -> ExemplarDB:
    """One record per qualifying claim; appends to ``db`` when given."""
    g = _gold_map(gold)
    db = db if db is not None else ExemplarDB(n_filters)
    if db.n_filters != n_filters:
        raise ValueError(f"database has M={db.n_filters}, traces come from M={n_filters}")
    for t in traces:
        claim = g[t.claim_id]
        if verifiable_only and not claim.verifiable:
            continue
        db.add(exemplar_vector(t), t.claim_id, t.selected_label, claim.label, partition)
    return db


def audit_tp(pred: Prediction, query: np.ndarray, db: ExemplarDB, cutoff: float = math.inf,
             partition: str | None = None) -> Prediction:
    """Admit only when the nearest exemplar is a true positive within ``cutoff``."""
    rec, dist = db.nearest(query, partition)
    reasons = []
    if not rec.is_true_positive:
        reasons.append("exemplar_not_tp")
    if not dist <= cutoff:
        reasons.append("exemplar_distance")
    ok = not reasons and pred.admitted
    return dataclasses.replace(pred, admitted=ok, label=pred.label if ok else None,
                               gate_reasons=pred.gate_reasons + reasons)


def audit_update(pred: Prediction, query: np.ndarray, db: ExemplarDB, datastore_changed: bool,
                 partition: str = "update") -> Prediction:
    """On a changed datastore, take the nearest update-set exemplar's reference label."""
    if not datastore_changed:
        return pred
    rec, _ = db.nearest(query, partition)
    return dataclasses.replace(pred, label=rec.reference, admitted=True,
                               gate_reasons=pred.gate_reasons + ["exemplar_update"])


@dataclass(frozen=True)
class CurveRow:
    cutoff: float
    admitted: int
    total: int
    accuracy: float  # over the admitted subset; nan when empty

    @property
    def fraction(self) -> float:
        return self.admitted / self.total if self.total else 0.0


def admission_curve(
    db: ExemplarDB, preds: Sequence[Prediction], queries: Sequence[np.ndarray], gold, cutoffs: Sequence[float]
) -> list[CurveRow]:
    """Admission fraction and admitted accuracy of the true-positive gate at each cutoff."""
    if list(cutoffs) != sorted(cutoffs):
        raise ValueError("cutoffs must be sorted ascending")
    if len(preds) != len(queries):
        raise ValueError("one query vector per prediction")
    g = _gold_map(gold)
    matches = [db.nearest(q) for q in queries]
    rows = []
    for c in cutoffs:
        keep = [p for p, (rec, d) in zip(preds, matches) if rec.is_true_positive and d <= c and p.label is not None]
        acc = sum(p.label is g[p.claim_id].label for p in keep) / len(keep) if keep else math.nan
        rows.append(CurveRow(float(c), len(keep), len(preds), acc))
    return rows
