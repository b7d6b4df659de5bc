import json
import math
from pathlib import Path

import pytest

from memsearch.cli import main
from memsearch.config import ConfigError, RunConfig, flag_keys, from_dict, load_config

TINY = [
    "--corpus.synth.n_train", "20", "--corpus.synth.n_dev", "10", "--corpus.synth.n_test", "6",
    "--corpus.synth.n_sym_dev", "10", "--corpus.synth.n_sym_test", "10",
    "--encoder.vocab_size", "512", "--encoder.d_ctx", "8", "--encoder.d_emb", "4", "--encoder.n_filters", "6",
    "--train.epochs_max", "1", "--train.k1_schedule", "[4]", "--train.z", "2",
    "--eval.k1", "4", "--eval.z", "2",
]


def run_dir_from(capsys) -> Path:
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def error_line(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """synth then train once for the whole module."""
    out = tmp_path_factory.mktemp("runs")
    base = ["--out_dir", str(out), *TINY]
    assert main(["synth", *base]) == 0
    corpus = next(out.glob("synth-*")) / "corpus"
    assert main(["train", *base, "--corpus.data_dir", str(corpus)]) == 0
    run = next(out.glob("train-*"))
    return out, corpus, run, base + ["--corpus.data_dir", str(corpus)]


# -- config -------------------------------------------------------------------


def test_defaults_round_trip():
    cfg = RunConfig()
    again = from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert json.loads(cfg.to_json())["audit"]["cutoffs"][-1] == "inf"
    assert math.isinf(again.audit.cutoffs[-1])


def test_every_violation_is_listed(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"bogus": 1, "train": {"lr_encodr": 0.1, "patience": "x"},
                                "encoder": {"d_ctx": 1.5}, "eval": {"split": "nope"}}))
    with pytest.raises(ConfigError) as e:
        load_config(path)
    joined = "\n".join(e.value.problems)
    for key in ("bogus", "train.lr_encodr", "train.patience", "encoder.d_ctx", "eval.split"):
        assert key in joined


def test_flags_override_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr_memory": 0.5, "z": 2}}))
    cfg = load_config(path, {"train.lr_memory": 0.25})
    assert cfg.train.lr_memory == 0.25 and cfg.train.z == 2


def test_semantic_validation_reaches_sections():
    with pytest.raises(ConfigError) as e:
        from_dict({"train": {"k1_schedule": [30, 10]}, "search": {"k1": 2, "z": 3}})
    assert any(p.startswith("train") for p in e.value.problems)
    assert any(p.startswith("search") for p in e.value.problems)


def test_every_leaf_has_a_flag():
    keys = flag_keys()
    assert "train.lr_encoder" in keys and "corpus.synth.seed" in keys and "audit.cutoffs" in keys
    assert len(keys) == len(set(keys))


def test_shipped_default_config_is_valid():
    path = Path(__file__).resolve().parents[1] / "configs" / "default.json"
    assert load_config(path) == RunConfig()


# -- command line ---------------------------------------------------------------


def test_config_errors_exit_2_with_json(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"nope": 1}, "extra": True}))
    assert main(["synth", "--config", str(path), "--out_dir", str(tmp_path)]) == 2
    err = error_line(capsys)
    assert err["error"] == "config"
    assert {p.split(":")[0] for p in err["problems"]} == {"extra", "train.nope"}


def test_missing_checkpoint_names_the_path(tmp_path, capsys, trained):
    _, _, _, base = trained
    missing = tmp_path / "nowhere" / "checkpoint.bin"
    assert main(["eval", *base, "--out_dir", str(tmp_path), "--checkpoint", str(missing)]) == 3
    err = error_line(capsys)
    assert err["error"] == "missing_file" and err["path"] == str(missing)
    assert str(missing) in err["message"]


def test_missing_config_file_is_reported(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "absent.json")]) == 3
    assert error_line(capsys)["path"].endswith("absent.json")


def test_train_run_is_self_describing(trained):
    _, corpus, run, _ = trained
    for name in ("config.json", "manifest.json", "checkpoint.bin", "vocab.txt", "metrics.csv", "train_log.txt",
                 "summary.json"):
        assert (run / name).exists(), name
    cfg = from_dict(json.loads((run / "config.json").read_text()))
    assert cfg.corpus.data_dir == str(corpus) and cfg.train.epochs_max == 1
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seeds"]["run"] == cfg.seed
    assert "corpus/wiki.tsv" in manifest["inputs"]


def test_eval_twice_is_byte_identical(tmp_path, capsys, trained):
    _, _, run, base = trained
    outs = []
    for k in range(2):
        assert main(["eval", *base, "--out_dir", str(tmp_path / str(k)), "--checkpoint", str(run)]) == 0
        outs.append(run_dir_from(capsys))
    for name in ("predictions.jsonl", "traces.jsonl", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    first = json.loads((outs[0] / "predictions.jsonl").read_text().splitlines()[0])
    assert list(first) == ["id", "predicted_label", "predicted_evidence"]


def test_audit_and_align_commands(tmp_path, capsys, trained):
    _, _, run, base = trained
    if not (run / "gates.json").exists():
        pytest.skip("tiny model produced no correct training retrievals to set gates")
    assert main(["audit", *base, "--out_dir", str(tmp_path), "--checkpoint", str(run)]) == 0
    audit = run_dir_from(capsys)
    rows = (audit / "curve.csv").read_text().splitlines()
    fractions = [float(r.split(",")[3]) for r in rows[1:]]
    assert fractions == sorted(fractions)
    for name in ("base", "exa_tp", "exchange", "exa_update"):
        assert (audit / f"predictions_{name}.jsonl").exists()
    assert (audit / "exemplars.mms").exists() and (audit / "exemplars.mms.jsonl").exists()

    dev_ids = [json.loads(line)["id"] for line in
               (Path(json.loads((run / "config.json").read_text())["corpus"]["data_dir"]) / "dev.jsonl")
               .read_text().splitlines()[:2]]
    assert main(["align", *base, "--out_dir", str(tmp_path), "--checkpoint", str(run),
                 "--align.claim_ids", json.dumps(dev_ids)]) == 0
    align = run_dir_from(capsys)
    assert (align / "alignments.html").exists()
    for line in (align / "alignments.jsonl").read_text().splitlines():
        assert set(json.loads(line)) >= {"query_tokens", "support_tokens", "max_pairs"}


def test_cache_list_and_clear(tmp_path, capsys, trained):
    _, _, run, base = trained
    cache = tmp_path / "cache"
    assert main(["eval", *base, "--out_dir", str(tmp_path), "--checkpoint", str(run),
                 "--search.cache_dir", str(cache)]) == 0
    capsys.readouterr()
    assert list(cache.glob("*.mms"))
    assert main(["cache", "list", "--search.cache_dir", str(cache)]) == 0
    assert ".mms" in capsys.readouterr().out
    assert main(["cache", "clear", "--search.cache_dir", str(cache)]) == 0
    assert not list(cache.glob("*.mms"))
