"""Train the default configuration on several seeds and report dev and perturbed-split numbers.

    python scripts/pilot.py --seeds 7 11 13 --out runs/pilot.json

Each seed regenerates the synthetic corpus with that seed and trains the
default model on it. The JSON written to --out holds per-epoch dev metrics,
wall time, level-distance gate results and exemplar-audit results per seed.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import torch

from memsearch.config import RunConfig
from memsearch.corpus import SynthConfig, generate_synthetic
from memsearch.evaluator import accuracy, admitted_subset, fever_score, gated_predict, predictions_from_traces
from memsearch.pipeline import audit_sym, fit, run_search
from memsearch.searcher import SearchConfig
from memsearch.utils import deterministic_mode


def changed_accuracy(preds, changed, gold):
    rows = [p for p, c in zip(preds, changed) if c]
    return (accuracy(rows, gold) if rows else None), len(rows)


def run_seed(seed: int, epochs: int | None) -> dict:
    cfg = RunConfig(seed=seed)
    deterministic_mode(seed)
    corpus = generate_synthetic(SynthConfig(**{**cfg.corpus.synth.__dict__, "seed": seed}))
    enc = cfg.encoder
    enc.seed = seed
    train_cfg = cfg.train
    if epochs is not None:
        train_cfg.epochs_max = epochs
    t0 = time.perf_counter()
    res = fit(corpus, enc, train_cfg, on_epoch=lambda m: print(f"[seed {seed}] {m.log_line()}", flush=True))
    train_seconds = time.perf_counter() - t0

    scfg = SearchConfig(k1=cfg.eval.k1, z=cfg.eval.z)
    dev_traces = run_search(res.model, corpus.dev, corpus.store, scfg)
    dev_preds = predictions_from_traces(dev_traces)
    out = {
        "seed": seed,
        "train_seconds": train_seconds,
        "epochs": [m.__dict__ for m in res.train_result.history],
        "best_epoch": res.train_result.best_epoch,
        "dev_accuracy": accuracy(dev_preds, corpus.dev),
        "dev_fever": fever_score(dev_preds, corpus.dev),
        "gates": None if res.gates is None else res.gates.__dict__,
    }
    if res.gates is not None:
        audit = audit_sym(res.model, corpus, res.gates, scfg, res.train_traces)
        gold = {c.claim_id: c for c in corpus.sym_test}
        gated = admitted_subset([gated_predict(p, res.gates) for p in audit.base])
        out["sym_test"] = {
            "n": len(audit.base),
            "base_accuracy": accuracy(audit.base, gold),
            "gated_accuracy": accuracy(gated, gold) if gated else None,
            "gated_fraction": len(gated) / len(audit.base),
            "exchange_accuracy": accuracy(audit.exchange, gold),
            "exa_tp_accuracy": accuracy(admitted_subset(audit.exa_tp), gold) if admitted_subset(audit.exa_tp) else None,
            "exa_tp_fraction": len(admitted_subset(audit.exa_tp)) / len(audit.base),
            "changed_base": changed_accuracy(audit.base, audit.changed, gold),
            "changed_exa_update": changed_accuracy(audit.exa_update, audit.changed, gold),
        }
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 11, 13])
    ap.add_argument("--epochs", type=int, default=None, help="override train.epochs_max")
    ap.add_argument("--out", default="runs/pilot.json")
    args = ap.parse_args()
    torch.set_num_threads(1)
    results = []
    for s in args.seeds:
        r = run_seed(s, args.epochs)
        print(json.dumps({k: v for k, v in r.items() if k != "epochs"}, indent=2), flush=True)
        results.append(r)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
