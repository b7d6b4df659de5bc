"""memsearch command line: synth, train, eval, audit, align, cache.

Every command writes into a fresh timestamped directory under ``out_dir``
holding the resolved config and a manifest of seeds and input checksums.
Failures print one JSON line on stderr, {"error": kind, "message": ...},
and exit non-zero (2 config, 3 missing file, 1 anything else).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as _dt
import fcntl
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .align import align_texts, write_html, write_json
from .config import ConfigError, RunConfig, flag_keys, load_config, parse_flag_value
from .corpus import SynthCorpus, generate_synthetic
from .encoder import Vocabulary
from .evaluator import GateThresholds, format_table, write_predictions
from .exemplar import admission_curve
from .model import MemoryModel
from .searcher import SearchConfig, write_traces
from .seqformat import format_query, format_support
from .utils import deterministic_mode, sha256_file, sha256_tree

log = logging.getLogger("memsearch")

COMMANDS = ("synth", "train", "eval", "audit", "align", "cache")


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# run directories


def make_run_dir(cfg: RunConfig, command: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run = Path(cfg.out_dir) / f"{command}-{stamp}"
    run.mkdir(parents=True, exist_ok=False)
    (run / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    return run


def write_manifest(run: Path, cfg: RunConfig, command: str, inputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "seeds": {"run": cfg.seed, "synth": cfg.corpus.synth.seed, "encoder": cfg.encoder.seed,
                  "train": cfg.train.seed},
        "deterministic": cfg.deterministic,
        "inputs": inputs,
    }
    (run / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(str(path))
    return path


def _load_corpus(cfg: RunConfig) -> tuple[SynthCorpus, dict[str, str]]:
    if cfg.corpus.data_dir is None:
        raise ConfigError(["corpus.data_dir: required (run `synth` first)"])
    d = _need(Path(cfg.corpus.data_dir))
    _need(d / "wiki.tsv")
    return SynthCorpus.load(d), {f"corpus/{k}": v for k, v in sha256_tree(d).items()}


def _checkpoint_paths(arg: str | None) -> tuple[Path, Path, Path]:
    """(checkpoint, vocabulary, gates) from a train run directory or a checkpoint file."""
    if arg is None:
        raise ConfigError(["--checkpoint: required"])
    p = Path(arg)
    ckpt = p / "checkpoint.bin" if p.is_dir() else p
    _need(ckpt)
    return ckpt, _need(ckpt.parent / "vocab.txt"), ckpt.parent / "gates.json"


def _load_model(cfg: RunConfig, arg: str | None) -> tuple[MemoryModel, GateThresholds | None, dict[str, str]]:
    ckpt, vocab_path, gates_path = _checkpoint_paths(arg)
    model = MemoryModel.load(ckpt, Vocabulary.load(vocab_path))
    gates = GateThresholds.from_json(gates_path.read_text()) if gates_path.exists() else None
    inputs = {"checkpoint": sha256_file(ckpt), "vocab": sha256_file(vocab_path)}
    return model, gates, inputs


@contextlib.contextmanager
def cache_lock(cache_dir: Path):
    cache_dir.mkdir(parents=True, exist_ok=True)
    with open(cache_dir / ".lock", "w") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def _search_lock(cfg: RunConfig):
    return cache_lock(Path(cfg.search.cache_dir)) if cfg.search.cache_dir else contextlib.nullcontext()


def _eval_search(cfg: RunConfig) -> SearchConfig:
    return SearchConfig(k1=cfg.eval.k1, z=cfg.eval.z, chunk_size=cfg.search.chunk_size,
                        cache_dir=cfg.search.cache_dir, max_evidence=cfg.search.max_evidence)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> Path:
    run = make_run_dir(cfg, "synth")
    corpus = generate_synthetic(cfg.corpus.synth)
    corpus.save(run / "corpus")
    write_manifest(run, cfg, "synth", {})
    print(run / "corpus")
    return run


def cmd_train(cfg: RunConfig, args) -> Path:
    corpus, inputs = _load_corpus(cfg)
    run = make_run_dir(cfg, "train")
    write_manifest(run, cfg, "train", inputs)
    with open(run / "train_log.txt", "w", encoding="utf-8") as logf, _search_lock(cfg):
        def on_epoch(m):
            logf.write(m.log_line() + "\n")
            logf.flush()
            print(m.log_line(), flush=True)

        res = pipeline.fit(corpus, cfg.encoder, cfg.train, run, on_epoch,
                           SearchConfig(k1=cfg.train.k1_schedule[-1], z=cfg.train.z,
                                        chunk_size=cfg.search.chunk_size, cache_dir=cfg.search.cache_dir))
    res.model.vocab.save(run / "vocab.txt")
    res.model.save(run / "checkpoint.bin")
    if res.gates is not None:
        (run / "gates.json").write_text(res.gates.to_json() + "\n", encoding="utf-8")
    summary = {"best_dev_accuracy": res.train_result.best_accuracy, "best_epoch": res.train_result.best_epoch,
               "epochs_run": len(res.train_result.history), "diverged": res.train_result.diverged,
               "checkpoint_sha256": sha256_file(run / "checkpoint.bin")}
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(run)
    return run


def cmd_eval(cfg: RunConfig, args) -> Path:
    model, gates, inputs = _load_model(cfg, args.checkpoint)
    corpus, cin = _load_corpus(cfg)
    run = make_run_dir(cfg, "eval")
    write_manifest(run, cfg, "eval", {**inputs, **cin})
    split = cfg.eval.split
    claims = getattr(corpus, split)
    store = corpus.sym_store if split.startswith("sym") else corpus.store
    with _search_lock(cfg):
        traces = pipeline.run_search(model, claims, store, _eval_search(cfg))
    preds = pipeline.split_predictions(traces, split)
    write_predictions(preds, run / "predictions.jsonl")
    write_traces(traces, run / "traces.jsonl")
    rep = pipeline.report(preds, traces, claims, gates)
    (run / "report.json").write_text(json.dumps({"split": split, **rep.as_dict()}, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    rows = [["accuracy", rep.accuracy], ["fever_score", rep.fever]]
    if rep.admitted_fraction is not None:
        rows += [["gated_accuracy", rep.gated_accuracy if rep.gated_accuracy is not None else "n/a"],
                 ["admitted_fraction", rep.admitted_fraction]]
    (run / "report.txt").write_text(format_table(rows, ["metric", split]) + "\n", encoding="utf-8")
    print(run)
    return run


def cmd_audit(cfg: RunConfig, args) -> Path:
    model, gates, inputs = _load_model(cfg, args.checkpoint)
    if gates is None:
        raise MissingInput(str(_checkpoint_paths(args.checkpoint)[2]))
    corpus, cin = _load_corpus(cfg)
    run = make_run_dir(cfg, "audit")
    write_manifest(run, cfg, "audit", {**inputs, **cin})
    with _search_lock(cfg):
        out = pipeline.audit_sym(model, corpus, gates, _eval_search(cfg), split=cfg.audit.split,
                                 update_split=cfg.audit.update_split)
    out.db.save(run / "exemplars.mms")
    gold = {c.claim_id: c for c in getattr(corpus, cfg.audit.split)}
    from .evaluator import accuracy, admitted_subset

    rows = []
    for name, preds in (("base", out.base), ("exa_tp", out.exa_tp), ("exchange", out.exchange),
                        ("exa_update", out.exa_update)):
        write_predictions(preds, run / f"predictions_{name}.jsonl")
        adm = admitted_subset(preds)
        changed = [p for p, c in zip(preds, out.changed) if c]
        rows.append([name, accuracy(adm, gold) if adm else float("nan"), len(adm) / max(len(preds), 1),
                     accuracy(changed, gold) if changed else float("nan")])
    header = ["method", "admitted_accuracy", "admitted_fraction", "changed_store_accuracy"]
    (run / "report.txt").write_text(format_table(rows, header) + "\n", encoding="utf-8")
    curve = admission_curve(out.db, out.base, list(out.queries), gold, cfg.audit.cutoffs)
    with open(run / "curve.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cutoff", "admitted", "total", "fraction", "accuracy"])
        for r in curve:
            w.writerow([r.cutoff, r.admitted, r.total, f"{r.fraction:.6f}", f"{r.accuracy:.6f}"])
    print(run)
    return run


def cmd_align(cfg: RunConfig, args) -> Path:
    model, _, inputs = _load_model(cfg, args.checkpoint)
    corpus, cin = _load_corpus(cfg)
    claims = {c.claim_id: c for c in getattr(corpus, cfg.align.split)}
    missing = [i for i in cfg.align.claim_ids if i not in claims]
    if missing:
        raise ConfigError([f"align.claim_ids: {missing} not in split {cfg.align.split}"])
    run = make_run_dir(cfg, "align")
    write_manifest(run, cfg, "align", {**inputs, **cin})
    store = corpus.sym_store if cfg.align.split.startswith("sym") else corpus.store
    chosen = [claims[i] for i in cfg.align.claim_ids]
    traces = pipeline.run_search(model, chosen, store, _eval_search(cfg))
    level = cfg.align.level
    maps, titles = [], []
    for c, t in zip(chosen, traces):
        if not t.level2:
            continue
        top = t.level2[0].pointer
        if level == 3:
            pairs = [(p, store.text(p)) for p in t.selected_evidence]
            support = format_support(3, c, pairs, label=t.selected_label, max_tokens=model.max_len[3]).text
        else:
            support = format_support(level, c, [(top, store.text(top))], max_tokens=model.max_len[level]).text
        maps.append(align_texts(model, format_query(c, level).text, support, level))
        titles.append(f"claim {c.claim_id}, level {level}")
    write_json(maps, run / "alignments.jsonl")
    write_html(maps, run / "alignments.html", titles)
    print(run)
    return run


def cmd_cache(cfg: RunConfig, args) -> None:
    cache_dir = Path(cfg.search.cache_dir or Path(cfg.out_dir) / "cache")
    with cache_lock(cache_dir):
        files = sorted(p for p in cache_dir.glob("*.mms"))
        if args.action == "list":
            for p in files:
                print(f"{p.name}\t{p.stat().st_size}")
        else:
            for p in files:
                p.unlink()
            print(f"removed {len(files)} cache files")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "audit": cmd_audit,
            "align": cmd_align, "cache": cmd_cache}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memsearch")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        if name in ("eval", "audit", "align"):
            p.add_argument("--checkpoint", help="train run directory or checkpoint file")
        if name == "cache":
            p.add_argument("action", choices=("list", "clear"))
        for key in flag_keys():
            p.add_argument(f"--{key}", dest=f"set:{key}", metavar="VALUE")
    return ap


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, ensure_ascii=False), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {k[4:]: parse_flag_value(v) for k, v in vars(args).items() if k.startswith("set:") and v is not None}
    try:
        cfg = load_config(_need(Path(args.config)) if args.config else None, overrides)
        if cfg.deterministic:
            deterministic_mode(cfg.seed)
        HANDLERS[args.command](cfg, args)
    except ConfigError as e:
        _error("config", str(e), problems=e.problems)
        return 2
    except FileNotFoundError as e:
        path = str(e) if isinstance(e, MissingInput) else (e.filename or str(e))
        _error("missing_file", f"no such file: {path}", path=path)
        return 3
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports everything
        log.debug("failure", exc_info=True)
        _error(type(e).__name__, str(e))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
