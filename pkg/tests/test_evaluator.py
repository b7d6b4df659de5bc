import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memsearch.corpus import LABELS, ClaimRecord, EvidencePointer, Label
from memsearch.evaluator import (
    GateThresholds,
    Prediction,
    accuracy,
    admitted_subset,
    compute_gates,
    exchange_predict,
    fever_score,
    gated_predict,
    prediction_json,
    read_predictions,
    recall_at_k,
    retrieval_diagnostics,
    write_predictions,
)
from memsearch.searcher import BeamEntry, SearchTrace

A1, A2, B0 = EvidencePointer("A", 1), EvidencePointer("A", 2), EvidencePointer("B", 0)


def claim(cid, label, sets=()):
    return ClaimRecord(cid, f"claim {cid}", label, tuple(tuple(s) for s in sets))


def trace(cid, beam1=(), beam2=(), d2=1.0, d3=1.0, label=Label.SUPPORTS):
    def beam(ptrs):
        return [BeamEntry(i, float(i), i, p) for i, p in enumerate(ptrs)]

    return SearchTrace(cid, beam(beam1), beam(beam2), {lab: d3 for lab in LABELS}, label, list(beam2)[:5],
                       d2, d3, z=1)


def test_accuracy_examples():
    gold = [claim(i, Label.SUPPORTS, [[A1]]) for i in range(4)]
    assert accuracy([Prediction(i, Label.SUPPORTS) for i in range(4)], gold) == 1.0
    preds = [Prediction(0, Label.SUPPORTS), Prediction(1, Label.REFUTES), Prediction(2, None),
             Prediction(3, Label.SUPPORTS)]
    assert accuracy(preds, gold) == 0.5


def test_fever_examples():
    gold = {1: claim(1, Label.SUPPORTS, [[A1]]), 2: claim(2, Label.UNVERIFIABLE)}
    assert fever_score([Prediction(1, Label.SUPPORTS, [A1, B0])], gold) == 1.0
    assert fever_score([Prediction(1, Label.SUPPORTS, [B0])], gold) == 0.0
    assert accuracy([Prediction(1, Label.SUPPORTS, [B0])], gold) == 1.0
    assert fever_score([Prediction(2, Label.UNVERIFIABLE, [])], gold) == 1.0


def test_fever_needs_a_complete_set_and_ignores_order():
    gold = {1: claim(1, Label.REFUTES, [[A1, A2], [B0]])}
    assert fever_score([Prediction(1, Label.REFUTES, [A2, A1])], gold) == 1.0
    assert fever_score([Prediction(1, Label.REFUTES, [A1])], gold) == 0.0


def test_prediction_evidence_capped_at_five():
    with pytest.raises(ValueError):
        Prediction(1, Label.SUPPORTS, [EvidencePointer("A", i) for i in range(6)])


_ptr = st.builds(EvidencePointer, st.sampled_from("ABC"), st.integers(0, 3))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(LABELS), st.sampled_from([*LABELS, None]),
                          st.lists(st.lists(_ptr, min_size=1, max_size=2), min_size=1, max_size=2),
                          st.lists(_ptr, max_size=5)), min_size=1, max_size=20))
def test_fever_never_exceeds_accuracy(rows):
    gold, preds = {}, []
    for i, (lab, plab, sets, ev) in enumerate(rows):
        gold[i] = claim(i, lab, [] if lab is Label.UNVERIFIABLE else sets)
        preds.append(Prediction(i, plab, ev))
    assert fever_score(preds, gold) <= accuracy(preds, gold)


def test_strict_match_rules():
    gold = {1: claim(1, Label.SUPPORTS, [[A1]]), 2: claim(2, Label.SUPPORTS, [[A1, A2]])}
    d = retrieval_diagnostics([trace(1, [B0, A1], [A1, B0]), trace(2, [A2, A1], [A2, A1])], gold)
    assert d["strict_match_level2"] == 1.0
    assert d["strict_match_level1"] == 0.5  # claim 1 has A1 only at position 2 of level 1
    assert d["doc_at_top_level1"] == 0.5 and d["doc_at_top_level2"] == 1.0


def test_diagnostics_skip_unverifiable():
    gold = {1: claim(1, Label.UNVERIFIABLE), 2: claim(2, Label.SUPPORTS, [[A1]])}
    d = retrieval_diagnostics([trace(1, [B0], [B0]), trace(2, [A1], [A1])], gold)
    assert d["n_verifiable"] == 1 and d["strict_match_level1"] == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.lists(_ptr, min_size=1, max_size=2), st.lists(_ptr, max_size=12, unique=True)),
                min_size=1, max_size=10))
def test_recall_non_decreasing_in_k(rows):
    gold = {i: claim(i, Label.SUPPORTS, [s]) for i, (s, _) in enumerate(rows)}
    traces = [trace(i, beam) for i, (_, beam) in enumerate(rows)]
    r = [recall_at_k(traces, gold, k) for k in (1, 2, 4, 8, 16)]
    assert r == sorted(r)


def test_gate_means():
    gold = {i: claim(i, Label.SUPPORTS, [[A1]]) for i in range(4)}
    traces = [trace(0, [A1], [A1], d2=0.2, d3=0.1), trace(1, [A1], [A1], d2=0.6, d3=0.3),
              trace(2, [A1], [A1], d2=0.7, d3=0.5), trace(3, [B0], [B0], d2=9.0, d3=0.7)]
    g = compute_gates(traces, gold)
    assert g.level2_mean == pytest.approx(0.5) and g.n_level2 == 3
    assert g.level3_mean == pytest.approx(0.4) and g.n_level3 == 4
    assert GateThresholds.from_json(g.to_json()) == g


def test_gates_need_qualifying_traces():
    gold = {0: claim(0, Label.SUPPORTS, [[A1]])}
    with pytest.raises(ValueError):
        compute_gates([trace(0, [B0], [B0], label=Label.REFUTES)], gold)


def test_gate_boundary_is_strict():
    gates = GateThresholds(0.49, 0.92)
    ok = gated_predict(Prediction(1, Label.REFUTES, level2_distance=0.1, level3_distance=0.5), gates)
    assert ok.admitted and ok.label is Label.REFUTES
    edge = gated_predict(Prediction(1, Label.REFUTES, level2_distance=0.49, level3_distance=0.5), gates)
    assert not edge.admitted and edge.label is None and edge.gate_reasons == ["level2_distance"]
    assert admitted_subset([ok, edge]) == [ok]


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(LABELS), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_gating_only_abstains(lab, d2, d3, m2, m3):
    p = Prediction(1, lab, level2_distance=d2, level3_distance=d3)
    out = gated_predict(p, GateThresholds(m2, m3))
    assert out.label in (lab, None)
    assert out.admitted == (d2 < m2 and d3 < m3)


def test_exchange_rule():
    gates = GateThresholds(0.5, 0.5)
    far = Prediction(1, Label.SUPPORTS, level2_distance=0.9, level3_distance=0.1)
    near = Prediction(1, Label.SUPPORTS, level2_distance=0.1, level3_distance=0.1)
    assert exchange_predict(far, gates, True).label is Label.REFUTES
    assert exchange_predict(far, gates, False).label is Label.SUPPORTS
    assert exchange_predict(near, gates, True).label is Label.SUPPORTS
    at_mean = Prediction(1, Label.REFUTES, level2_distance=0.1, level3_distance=0.5)
    assert exchange_predict(at_mean, gates, True).label is Label.SUPPORTS


def test_exchange_maps_unverifiable_to_nearer_label():
    p = Prediction(1, Label.UNVERIFIABLE, level2_distance=0.1, level3_distance=0.1,
                   label_distances={Label.SUPPORTS: 0.4, Label.REFUTES: 0.3, Label.UNVERIFIABLE: 0.1})
    assert exchange_predict(p, GateThresholds(1, 1), False).label is Label.REFUTES
    with pytest.raises(ValueError):
        exchange_predict(Prediction(1, None), GateThresholds(1, 1), False)


def test_prediction_line_layout():
    p = Prediction(7, Label.UNVERIFIABLE, [EvidencePointer("Résistance", 3)])
    line = prediction_json(p)
    assert line == '{"id": 7, "predicted_label": "NOT ENOUGH INFO", "predicted_evidence": [["Résistance", 3]]}'
    assert list(json.loads(line)) == ["id", "predicted_label", "predicted_evidence"]
    assert prediction_json(Prediction(1, Label.SUPPORTS)).endswith('"SUPPORTS", "predicted_evidence": []}')
    assert json.loads(prediction_json(Prediction(2, None)))["predicted_label"] is None


def test_predictions_file_round_trip(tmp_path):
    preds = [Prediction(1, Label.REFUTES, [A1, B0]), Prediction(2, Label.SUPPORTS), Prediction(3, None)]
    path = tmp_path / "p.jsonl"
    write_predictions(preds, path)
    raw = path.read_bytes()
    assert raw.endswith(b"\n") and b"\r" not in raw and raw.count(b"\n") == 3
    back = read_predictions(path)
    assert [(p.claim_id, p.label, p.evidence) for p in back] == [(p.claim_id, p.label, p.evidence) for p in preds]


def test_metrics_are_bit_stable():
    gold = {i: claim(i, LABELS[i % 3], [] if i % 3 == 2 else [[A1]]) for i in range(30)}
    preds = [Prediction(i, LABELS[(i * 7) % 3], [A1] if i % 2 else []) for i in range(30)]
    assert fever_score(preds, gold) == fever_score(list(preds), dict(gold))
    assert not math.isnan(accuracy(preds, gold))
