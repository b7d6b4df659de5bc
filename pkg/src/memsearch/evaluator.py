"""Scoring, retrieval diagnostics and level-distance gating."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import ClaimRecord, EvidencePointer, Label
from .searcher import SearchTrace


@dataclass
class Prediction:
    claim_id: int
    label: Label | None  # None = abstain
    evidence: list[EvidencePointer] = field(default_factory=list)
    level2_distance: float = math.inf
    level3_distance: float = math.inf
    label_distances: dict[Label, float] = field(default_factory=dict)
    admitted: bool = True
    gate_reasons: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.evidence) > 5:
            raise ValueError("at most five evidence sentences")


def predictions_from_traces(traces: Iterable[SearchTrace]) -> list[Prediction]:
    return [
        Prediction(
            claim_id=t.claim_id,
            label=t.selected_label,
            evidence=list(t.selected_evidence[:5]),
            level2_distance=t.level2_distance,
            level3_distance=t.level3_distance,
            label_distances=dict(t.level3),
        )
        for t in traces
    ]


def _gold_map(gold) -> Mapping[int, ClaimRecord]:
    return gold if isinstance(gold, Mapping) else {c.claim_id: c for c in gold}


def accuracy(preds: Sequence[Prediction], gold) -> float:
    """Fraction of exact label matches; abstentions count as wrong."""
    g = _gold_map(gold)
    if not preds:
        return 0.0
    return sum(p.label is g[p.claim_id].label for p in preds) / len(preds)


def fever_correct(pred: Prediction, claim: ClaimRecord) -> bool:
    if pred.label is not claim.label:
        return False
    if claim.label is Label.UNVERIFIABLE:
        return True
    predicted = set(pred.evidence[:5])
    return any(set(s) <= predicted for s in claim.gold_evidence_sets)


def fever_score(preds: Sequence[Prediction], gold) -> float:
    """Label correct and, for verifiable claims, some gold set fully inside the first five sentences."""
    g = _gold_map(gold)
    if not preds:
        return 0.0
    return sum(fever_correct(p, g[p.claim_id]) for p in preds) / len(preds)


def admitted_subset(preds: Sequence[Prediction]) -> list[Prediction]:
    return [p for p in preds if p.admitted and p.label is not None]


# ---------------------------------------------------------------------------
# retrieval diagnostics


def _strict_match(beam_ptrs: Sequence[EvidencePointer], claim: ClaimRecord) -> bool:
    for s in claim.gold_evidence_sets:
        if len(s) <= 2 and set(s) <= set(beam_ptrs[: len(s)]):
            return True
    return False


def recall_at_k(traces: Sequence[SearchTrace], gold, k: int, level: int = 1) -> float:
    """Share of verifiable claims with some complete gold set in the top-k of a level's beam."""
    g = _gold_map(gold)
    rows = [t for t in traces if g[t.claim_id].verifiable]
    if not rows:
        return 0.0
    hit = 0
    for t in rows:
        beam = t.level1 if level == 1 else t.level2
        top = {e.pointer for e in beam[:k]}
        hit += any(set(s) <= top for s in g[t.claim_id].gold_evidence_sets)
    return hit / len(rows)


def retrieval_diagnostics(traces: Sequence[SearchTrace], gold, ks: Sequence[int] = (1, 2, 4, 8, 16)) -> dict:
    g = _gold_map(gold)
    rows = [t for t in traces if g[t.claim_id].verifiable]
    out: dict = {"n_verifiable": len(rows)}
    for level in (1, 2):
        strict = doc = 0
        for t in rows:
            beam = [e.pointer for e in (t.level1 if level == 1 else t.level2)]
            claim = g[t.claim_id]
            strict += _strict_match(beam, claim)
            titles = {p.page_title for p in claim.gold_pointers()}
            doc += bool(beam) and beam[0].page_title in titles
        n = max(len(rows), 1)
        out[f"strict_match_level{level}"] = strict / n
        out[f"doc_at_top_level{level}"] = doc / n
    out["recall_at_k"] = {k: recall_at_k(traces, g, k) for k in ks}
    return out


# ---------------------------------------------------------------------------
# level-distance gates


@dataclass
class GateThresholds:
    level2_mean: float
    level3_mean: float
    level2_std: float = 0.0
    level3_std: float = 0.0
    n_level2: int = 0
    n_level3: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, s: str) -> "GateThresholds":
        return cls(**json.loads(s))


def correct_retrieval(trace: SearchTrace, claim: ClaimRecord) -> bool:
    """Top of the level-2 beam is a gold evidence sentence."""
    return claim.verifiable and bool(trace.level2) and trace.level2[0].pointer in claim.gold_pointers()


def compute_gates(traces: Sequence[SearchTrace], gold) -> GateThresholds:
    """Training-set means of the level-2 distance given correct retrieval and
    the level-3 distance given correct classification."""
    g = _gold_map(gold)
    d2 = [t.level2_distance for t in traces if correct_retrieval(t, g[t.claim_id])]
    d3 = [t.level3_distance for t in traces if t.selected_label is g[t.claim_id].label]
    if not d2 or not d3:
        raise ValueError("no correct retrievals or classifications to set gates from")
    return GateThresholds(float(np.mean(d2)), float(np.mean(d3)), float(np.std(d2)), float(np.std(d3)),
                          len(d2), len(d3))


def gated_predict(pred: Prediction, gates: GateThresholds) -> Prediction:
    reasons = []
    if not pred.level2_distance < gates.level2_mean:
        reasons.append("level2_distance")
    if not pred.level3_distance < gates.level3_mean:
        reasons.append("level3_distance")
    admitted = not reasons
    return dataclasses.replace(pred, admitted=admitted, gate_reasons=reasons,
                               label=pred.label if admitted else None)


_OPPOSITE = {Label.SUPPORTS: Label.REFUTES, Label.REFUTES: Label.SUPPORTS}


def to_two_class(pred: Prediction) -> Prediction:
    """Map an Unverifiable prediction to the nearer of Supports/Refutes."""
    if pred.label is not Label.UNVERIFIABLE:
        return pred
    d = pred.label_distances
    lab = Label.SUPPORTS if d[Label.SUPPORTS] <= d[Label.REFUTES] else Label.REFUTES
    return dataclasses.replace(pred, label=lab)


def exchange_predict(pred: Prediction, gates: GateThresholds, datastore_changed: bool) -> Prediction:
    """Flip Supports/Refutes when the datastore changed and either distance is beyond its mean."""
    pred = to_two_class(pred)
    if pred.label is None or pred.label not in _OPPOSITE:
        raise ValueError("exchange needs a two-class prediction")
    far = pred.level2_distance >= gates.level2_mean or pred.level3_distance >= gates.level3_mean
    if datastore_changed and far:
        return dataclasses.replace(pred, label=_OPPOSITE[pred.label], gate_reasons=pred.gate_reasons + ["exchanged"])
    return pred


# ---------------------------------------------------------------------------
# files and reports


def prediction_json(pred: Prediction) -> str:
    label = pred.label.fever if pred.label is not None else None
    return json.dumps(
        {"id": pred.claim_id, "predicted_label": label,
         "predicted_evidence": [[p.page_title, p.sentence_index] for p in pred.evidence]},
        ensure_ascii=False,
    )


def write_predictions(preds: Iterable[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in preds:
            f.write(prediction_json(p) + "\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            o = json.loads(line)
            lab = None if o["predicted_label"] is None else Label.from_fever(o["predicted_label"])
            out.append(Prediction(o["id"], lab, [EvidencePointer(t, i) for t, i in o["predicted_evidence"]]))
    return out


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [[str(h) for h in header]] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_csv(rows: Sequence[Sequence], header: Sequence[str], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
