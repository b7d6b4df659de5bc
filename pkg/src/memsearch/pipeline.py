"""End-to-end steps shared by the command line, the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import ClaimRecord, SynthCorpus, WikiStore, candidate_pointers
from .encoder import EncoderConfig, Vocabulary
from .evaluator import (
    GateThresholds,
    Prediction,
    accuracy,
    admitted_subset,
    compute_gates,
    exchange_predict,
    fever_score,
    gated_predict,
    predictions_from_traces,
    retrieval_diagnostics,
    to_two_class,
)
from .exemplar import ExemplarDB, audit_tp, audit_update, build_db, exemplar_vector
from .model import MemoryModel
from .searcher import SearchConfig, SearchTrace, search_many
from .trainer import EpochMetrics, TrainConfig, TrainData, TrainResult, train

RESERVED_TOKENS = ("claim", "evidence", "sentence", "consider", "predict", "reference",
                   "supports", "refutes", "unverifiable", ":", ",")


def build_vocab(store: WikiStore, claims: Sequence[ClaimRecord], size: int) -> Vocabulary:
    """Titles and sentences of the store plus training claim texts, prefix words first."""
    texts = [s for p in store.pointers() for s in (p.page_title, store.text(p))]
    texts += [c.claim_text for c in claims]
    return Vocabulary.build(texts, size, reserved=RESERVED_TOKENS)


def split_predictions(traces: Sequence[SearchTrace], split: str) -> list[Prediction]:
    """Predictions for a split; the two-class perturbed splits never get Unverifiable."""
    preds = predictions_from_traces(traces)
    return [to_two_class(p) for p in preds] if split.startswith("sym") else preds


def run_search(model: MemoryModel, claims: Sequence[ClaimRecord], store: WikiStore,
               cfg: SearchConfig) -> list[SearchTrace]:
    cands = [candidate_pointers(c.claim_text, store) for c in claims]
    return search_many(claims, cands, store, model, cfg)


@dataclass
class FitResult:
    model: MemoryModel
    train_result: TrainResult
    gates: GateThresholds | None
    train_traces: list[SearchTrace] = field(default_factory=list)


def fit(
    corpus: SynthCorpus,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
    gate_search: SearchConfig | None = None,
) -> FitResult:
    """Build the vocabulary, train, and set the level-distance gates from training traces."""
    vocab = build_vocab(corpus.store, corpus.train, enc_cfg.vocab_size)
    model = MemoryModel(enc_cfg, vocab)
    res = train(TrainData(corpus.train, corpus.dev, corpus.store), model, train_cfg, out_dir, on_epoch)
    scfg = gate_search or SearchConfig(k1=train_cfg.k1_schedule[-1], z=train_cfg.z)
    traces = run_search(model, corpus.train, corpus.store, scfg)
    try:
        gates = compute_gates(traces, corpus.train)
    except ValueError:
        gates = None
    return FitResult(model, res, gates, traces)


@dataclass
class SplitReport:
    n: int
    accuracy: float
    fever: float
    retrieval: dict
    gated_accuracy: float | None = None
    admitted_fraction: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def report(preds: Sequence[Prediction], traces: Sequence[SearchTrace], gold,
           gates: GateThresholds | None = None) -> SplitReport:
    rep = SplitReport(len(preds), accuracy(preds, gold), fever_score(preds, gold),
                      retrieval_diagnostics(traces, gold))
    if gates is not None and preds:
        adm = admitted_subset([gated_predict(p, gates) for p in preds])
        rep.admitted_fraction = len(adm) / len(preds)
        rep.gated_accuracy = accuracy(adm, gold) if adm else None
    return rep


def datastore_changed(trace: SearchTrace, store: WikiStore, canonical: WikiStore) -> bool:
    """Some selected evidence sentence reads differently from the canonical store."""
    return any(p in canonical and store.text(p) != canonical.text(p) for p in trace.selected_evidence)


@dataclass
class AuditOutcome:
    base: list[Prediction]
    exa_tp: list[Prediction]
    exchange: list[Prediction]
    exa_update: list[Prediction]
    changed: list[bool]
    queries: np.ndarray
    db: ExemplarDB


def audit_sym(model: MemoryModel, corpus: SynthCorpus, gates: GateThresholds, scfg: SearchConfig,
              train_traces: Sequence[SearchTrace] | None = None, split: str = "sym_test",
              update_split: str = "sym_dev") -> AuditOutcome:
    """Base, ExA_tp, distance exchange and ExA_update predictions on a perturbed split.

    The perturbed splits are two-class, so base predictions of Unverifiable
    are mapped to the nearer of Supports and Refutes. The exemplar database holds verifiable training claims ("train") plus the
    perturbed update split ("update"), both searched against the datastore
    their claims were written for.
    """
    m = model.cfg.n_filters
    train_traces = list(train_traces) if train_traces is not None else run_search(model, corpus.train, corpus.store, scfg)
    db = build_db(train_traces, corpus.train, m, "train", verifiable_only=True)
    upd_claims = getattr(corpus, update_split)
    build_db(run_search(model, upd_claims, corpus.sym_store, scfg), upd_claims, m, "update",
             verifiable_only=True, db=db)

    claims = getattr(corpus, split)
    traces = run_search(model, claims, corpus.sym_store, scfg)
    base = [to_two_class(p) for p in predictions_from_traces(traces)]
    queries = np.stack([exemplar_vector(t) for t in traces]) if traces else np.zeros((0, 2 * m), np.float32)
    changed = [datastore_changed(t, corpus.sym_store, corpus.store) for t in traces]
    exa_tp = [audit_tp(p, q, db) for p, q in zip(base, queries)]
    exchange = [exchange_predict(p, gates, ch) for p, ch in zip(base, changed)]
    exa_update = [audit_update(p, q, db, ch) for p, q, ch in zip(base, queries, changed)]
    return AuditOutcome(base, exa_tp, exchange, exa_update, changed, queries, db)
