from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mlpmem.corpus import make_corpus
from mlpmem.decoder_lm import (
    DecoderLM,
    LmConfig,
    encode_stream,
    forward,
    layer_index,
    lm_loss,
    sliding_windows,
    train_lm,
)
from mlpmem.errors import ConfigMismatchError, ContextTooLongError, DivergenceError, VocabMismatchError
from mlpmem.optim import OptimSettings
from oracles import finite_difference_error


def small_model(seed: int = 0, **kw) -> DecoderLM:
    torch.manual_seed(seed)
    cfg = LmConfig(**({"n_layer": 2, "d_model": 16, "n_heads": 2, "n_ctx": 16, "n_vocab": 11} | kw))
    return DecoderLM(cfg).eval()


def test_config_defaults_are_standard_shape():
    cfg = LmConfig(d_model=32, n_heads=4)
    assert cfg.d_attn == 32 and cfg.d_ff == 128 and cfg.is_standard_shape
    with pytest.raises(ValueError):
        LmConfig(d_model=30, n_heads=4)


@pytest.mark.parametrize("frac,n,expected", [(0.7, 36, 25), (0.7, 5, 4), (1.0, 5, 5), (0.01, 5, 1),
                                             (0.2, 5, 1), (0.4, 5, 2), (0.6, 5, 3), (0.8, 5, 4)])
def test_layer_index(frac, n, expected):
    assert layer_index(frac, n) == expected


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6, 8, 12, 24, 48])
def test_layer_index_stable_under_float32_storage(n):
    for frac in np.round(np.arange(0.05, 1.0001, 0.05), 2):
        assert layer_index(float(np.float32(frac)), n) == layer_index(float(frac), n)


def test_layer_index_range():
    with pytest.raises(ValueError):
        layer_index(0.0, 4)
    with pytest.raises(ValueError):
        layer_index(1.2, 4)


def test_forward_distribution_and_hidden_states():
    m = small_model()
    out, hs = forward(m, [1, 2, 3])
    assert out.p_lm.shape == (11,) and abs(out.p_lm.sum() - 1) < 1e-6 and (out.p_lm >= 0).all()
    assert [h.layer_index for h in hs] == [1, 2]
    assert all(h.position == 2 and np.isfinite(h.vector).all() and h.vector.shape == (16,) for h in hs)


def test_single_token_context_works():
    out, hs = forward(small_model(), [4])
    assert abs(out.p_lm.sum() - 1) < 1e-6 and len(hs) == 2


def test_context_longer_than_n_ctx_rejected():
    with pytest.raises(ContextTooLongError):
        forward(small_model(), list(range(10)) * 2)


def test_causality():
    m = small_model()
    a = torch.tensor([[1, 2, 3, 4, 5]])
    b = torch.tensor([[1, 2, 3, 9, 0]])
    with torch.no_grad():
        la, _ = m(a)
        lb, _ = m(b)
    assert torch.allclose(la[0, :3], lb[0, :3], atol=1e-6)


def test_upto_layer_matches_full_forward():
    m = small_model()
    x = torch.tensor([[3, 1, 4, 1, 5]])
    with torch.no_grad():
        _, full = m(x, return_hidden=True)
        none, part = m(x, upto_layer=1)
    assert none is None and torch.equal(part[0], full[0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 200), st.integers(2, 40), st.data())
def test_sliding_windows_score_each_target_once(length, window, data):
    stride = data.draw(st.integers(1, window - 1))
    seen = []
    for b, e, first in sliding_windows(length, window, stride):
        assert 0 <= b < first <= e <= length and e - b <= window
        seen.extend(range(first, e))
    assert seen == list(range(1, length))


def test_encode_stream_matches_per_window_forward():
    m = small_model()
    ids = np.random.default_rng(0).integers(0, 11, size=50)
    enc = encode_stream(m, ids, layer=1, window_len=8, stride=3, full_logprobs=True)
    for b, e, first in sliding_windows(50, 8, 3):
        for j in range(first, e):
            out, hs = forward(m, ids[b:j])
            assert np.allclose(enc.keys[j - 1], hs[0].vector, atol=1e-5)
            assert np.isclose(enc.target_logprob[j - 1], np.log(out.p_lm[ids[j]]), atol=1e-5)
            assert np.allclose(np.exp(enc.logprobs[j - 1]), out.p_lm, atol=1e-5)


def test_encode_stream_rejects_foreign_ids():
    with pytest.raises(VocabMismatchError):
        encode_stream(small_model(), np.array([1, 2, 50]))


def test_lm_loss_gradient_matches_finite_differences():
    m = small_model(seed=1, n_ctx=8, d_model=8, n_heads=2, n_vocab=7).double().train()
    batch = torch.from_numpy(np.random.default_rng(1).integers(0, 7, size=(3, 8)))
    rel = finite_difference_error(m.parameters(), lambda: lm_loss(m, batch), np.random.default_rng(2), per_param=6)
    assert rel < 1e-4, rel


def test_training_reduces_loss_and_is_deterministic(tiny):
    c = tiny.corpus
    cfg = LmConfig(n_layer=2, d_model=16, n_heads=2, n_ctx=32, n_vocab=c.vocab.size)
    s = OptimSettings(steps=30, batch_size=8, lr=3e-3, warmup=3)
    m1, l1 = train_lm(c, cfg, s, seed=5, log_every=0)
    m2, l2 = train_lm(c, cfg, s, seed=5, log_every=0)
    assert np.mean(l1[-5:]) < l1[0]
    assert l1 == l2
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(a, b)


@pytest.mark.slow
def test_memorizes_a_tiny_corpus():
    text = " ".join(f"w{(i * 7) % 50}" if i % 11 else "." for i in range(1000))
    c = make_corpus(text, ratios=(1.0, 0.0, 0.0), window_len=32)
    cfg = LmConfig(n_layer=2, d_model=32, n_heads=2, n_ctx=32, n_vocab=c.vocab.size)
    m, _ = train_lm(c, cfg, OptimSettings(steps=300, batch_size=16, lr=5e-3, warmup=10), seed=0, log_every=0)
    enc = encode_stream(m, c.train, window_len=32, stride=16)
    assert np.exp(-enc.target_logprob.mean()) < 1.5


def test_vocab_mismatch_rejected(tiny):
    cfg = LmConfig(n_layer=1, d_model=8, n_heads=2, n_ctx=8, n_vocab=tiny.corpus.vocab.size + 1)
    with pytest.raises(VocabMismatchError):
        train_lm(tiny.corpus, cfg, OptimSettings(steps=1), log_every=0)


def test_nan_loss_aborts(tiny):
    cfg = LmConfig(n_layer=1, d_model=8, n_heads=2, n_ctx=8, n_vocab=tiny.corpus.vocab.size)
    with pytest.raises(DivergenceError):
        train_lm(tiny.corpus, cfg, OptimSettings(steps=20, lr=1e30, warmup=0), log_every=0)


def test_checkpoint_round_trip(tmp_path):
    m = small_model()
    m.save(tmp_path / "m.ckpt")
    n = DecoderLM.load(tmp_path / "m.ckpt", expected=m.cfg)
    for a, b in zip(m.state_dict().values(), n.state_dict().values()):
        assert torch.equal(a, b)
    n.save(tmp_path / "n.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()
    with pytest.raises(ConfigMismatchError):
        DecoderLM.load(tmp_path / "m.ckpt", expected=LmConfig(n_layer=3, d_model=16, n_heads=2, n_ctx=16,
                                                              n_vocab=11))
