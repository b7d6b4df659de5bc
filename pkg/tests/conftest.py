import pytest
import torch

from memsearch.corpus import SynthConfig, generate_synthetic
from memsearch.encoder import EncoderConfig
from memsearch.model import MemoryModel
from memsearch.pipeline import build_vocab

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SynthConfig(seed=3, n_train=60, n_dev=30, n_test=30, n_sym_dev=30, n_sym_test=30))


@pytest.fixture(scope="session")
def small_model(small_corpus):
    vocab = build_vocab(small_corpus.store, small_corpus.train, 1024)
    cfg = EncoderConfig(vocab_size=1024, d_ctx=16, d_emb=8, n_filters=12, seed=5)
    return MemoryModel(cfg, vocab)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance criterion's outcome for the end-of-run summary."""
    def record(n: int, ok: bool, detail: str) -> None:
        request.config.stash[ACCEPTANCE][n] = (ok, detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(ACCEPTANCE, {})
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(rows):
        ok, detail = rows[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
