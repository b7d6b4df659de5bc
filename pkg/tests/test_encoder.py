import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from memsearch.encoder import (
    PAD_ID,
    UNK_ID,
    ContextEncoder,
    EncoderConfig,
    Vocabulary,
    encode,
    level_input,
    memory_parameter_count,
    tokenize,
)
from memsearch.model import MemoryModel, read_checkpoint, write_checkpoint

VOCAB = Vocabulary.build(["the cat sat on the mat", "a dog ran"], 64)


def _encoder(seed=0, dtype=torch.float64):
    cfg = EncoderConfig(vocab_size=64, d_ctx=8, d_emb=4, n_filters=6, max_positions=20, seed=seed)
    enc = ContextEncoder(cfg)
    enc.reset_parameters(torch.Generator().manual_seed(seed))
    return enc.to(dtype)


def test_tokenize_boundaries():
    empty = tokenize("", VOCAB, 5)
    assert empty.n_real == 0 and list(empty.ids) == [PAD_ID] * 5
    exact = tokenize("the cat sat on the", VOCAB, 5)
    assert exact.n_real == 5 and not exact.truncated and PAD_ID not in exact.ids
    over = tokenize("the cat sat on the mat a dog", VOCAB, 5)
    assert over.truncated and over.tokens == ["the", "cat", "sat", "on", "the"]
    assert tokenize("zebra", VOCAB, 3).ids[0] == UNK_ID


def test_tokenize_spans_point_into_text():
    s = tokenize("The Cat, sat.", VOCAB, 10)
    assert [s.text[a:b] for a, b in s.spans] == ["The", "Cat", ",", "sat", "."]
    assert s.tokens == ["the", "cat", ",", "sat", "."]


def test_encode_determinism_and_padding():
    enc = _encoder()
    seq = tokenize("the cat sat", VOCAB, 6)
    a, b = encode(seq, enc), encode(seq, enc)
    assert np.array_equal(a, b) and a.shape == (8, 6)
    pad = enc.pad_state.numpy()
    assert all(np.array_equal(a[:, j], pad) for j in range(3, 6))
    allpad = encode(tokenize("", VOCAB, 4), enc)
    assert all(np.array_equal(allpad[:, j], pad) for j in range(4))


def test_encode_is_order_sensitive():
    enc = _encoder()
    a = encode(tokenize("the cat sat", VOCAB, 6), enc)
    b = encode(tokenize("cat the sat", VOCAB, 6), enc)
    assert not np.allclose(a, b)


def test_encode_rejects_out_of_range_ids():
    enc = _encoder()
    seq = tokenize("the cat", VOCAB, 4)
    seq.ids[0] = 999
    with pytest.raises(ValueError):
        encode(seq, enc)


def test_level_input_shape_and_zero_table():
    ctx = np.arange(4 * 5, dtype=float).reshape(4, 5)
    seq = tokenize("the cat sat", VOCAB, 5)
    x = level_input(ctx, seq, 1, np.zeros((64, 3)))
    assert x.shape == (7, 5)
    assert np.array_equal(x[:3], np.zeros((3, 5))) and np.array_equal(x[3:], ctx)
    with pytest.raises(ValueError):
        level_input(ctx, seq, 4, np.zeros((64, 3)))


def test_parameter_count_full_scale_configuration():
    assert memory_parameter_count(d_emb=300, d_ctx=768, n_filters=1000, vocab_size=7500, levels=1) == 3_318_000
    assert memory_parameter_count(d_emb=300, d_ctx=768, n_filters=1000, vocab_size=7500) == 9_954_000
    assert 300 + 768 == 1068


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_encoder_gradients_match_finite_differences(seed):
    enc = _encoder(seed % 7)
    seq = tokenize("the cat sat on the mat", VOCAB, 8)
    ids, pad = torch.as_tensor(seq.ids)[None], torch.as_tensor(seq.mask)[None]
    w = torch.as_tensor(np.random.default_rng(seed).normal(size=(1, 8, 8)))

    def f():
        return (enc(ids, pad) * w).sum()

    f().backward()
    params = [p for p in enc.parameters()]
    rng = np.random.default_rng(seed)
    for p in params:
        flat = p.data.view(-1)
        for k in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            if p.grad.view(-1)[k] == 0:
                continue
            old = flat[k].item()
            with torch.no_grad():
                flat[k] = old + 1e-3
                up = f().item()
                flat[k] = old - 1e-3
                down = f().item()
                flat[k] = old
            fd = (up - down) / 2e-3
            an = p.grad.view(-1)[k].item()
            assert abs(fd - an) <= 1e-4 * max(1.0, abs(an)), (fd, an)


def test_checkpoint_round_trip(small_model):
    buf = io.BytesIO()
    write_checkpoint(buf, small_model)
    buf.seek(0)
    cfg, tensors = read_checkpoint(buf)
    assert cfg.n_filters == small_model.cfg.n_filters and cfg.seed == small_model.cfg.seed
    clone = MemoryModel(cfg, small_model.vocab)
    clone.load_tensors(tensors)
    assert clone.checksum() == small_model.checksum()


def test_checkpoint_rejects_foreign_bytes():
    with pytest.raises(ValueError):
        read_checkpoint(io.BytesIO(b"NOPE" + bytes(100)))


def test_tied_query_key_init():
    enc = _encoder()
    for b in enc.blocks:
        assert torch.allclose(b.wq, 3.0 * b.wk)
