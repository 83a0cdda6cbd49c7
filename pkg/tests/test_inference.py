from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
import pytest

from mlpmem.decoder_lm import DecoderLM, forward, layer_index
from mlpmem.errors import ProvenanceError
from mlpmem.inference import (
    EvalConfig,
    bench_latency,
    encode_for_eval,
    evaluate_ppl,
    lambda_sweep,
    mixture_nll,
    normalize_mode,
    predict,
)
from mlpmem.knn import BruteForceIndex, knn_distribution, knn_search

CONTEXT = [3, 5, 7, 11, 2, 4]


def test_lambda_endpoints(tiny):
    p_lm = forward(tiny.model, CONTEXT)[0].p_lm
    np.testing.assert_allclose(predict(tiny.model, tiny.memory, CONTEXT, 0.0, "mlp"), p_lm, atol=1e-12)
    h = forward(tiny.model, CONTEXT)[1][layer_index(0.7, tiny.model.cfg.n_layer) - 1].vector
    p_mem = np.exp(tiny.memory.log_proba(h[None, :])[0])
    np.testing.assert_allclose(predict(tiny.model, tiny.memory, CONTEXT, 1.0, "mlp"), p_mem, atol=1e-6)
    p_knn = knn_distribution(knn_search(tiny.ds, h, 8), tiny.model.cfg.n_vocab).to_dense()
    np.testing.assert_allclose(predict(tiny.model, tiny.ds, CONTEXT, 1.0, "knn", k=8), p_knn, atol=1e-12)


@pytest.mark.parametrize("mode", ["lm", "knn", "mlp"])
def test_predict_is_a_distribution(tiny, mode):
    aux = {"lm": None, "knn": tiny.ds, "mlp": tiny.memory}[mode]
    p = predict(tiny.model, aux, CONTEXT, 0.25, mode, k=8)
    assert p.shape == (tiny.model.cfg.n_vocab,) and (p >= 0).all()
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


def test_mode_aliases_and_errors(tiny):
    assert normalize_mode("knn-lm") == "knn" and normalize_mode("mlp-mem") == "mlp"
    with pytest.raises(ValueError):
        normalize_mode("rnn")
    with pytest.raises(TypeError):
        predict(tiny.model, tiny.ds, CONTEXT, mode="mlp")
    with pytest.raises(ValueError):
        EvalConfig(lam=1.5)
    with pytest.raises(ValueError):
        EvalConfig(window_len=8, stride=9)


def test_provenance_mismatch(tiny):
    other = DecoderLM(tiny.model.cfg)
    with pytest.raises(ProvenanceError):
        predict(other, tiny.ds, CONTEXT, mode="knn")
    with pytest.raises(ProvenanceError):
        predict(other, tiny.memory, CONTEXT, mode="mlp")


def test_lm_perplexity_matches_per_token_forward(tiny):
    """With stride 1 each target is predicted from the previous ``window - 1`` tokens."""
    ids = tiny.corpus.test[:40]
    w = 8
    rep = evaluate_ppl(tiny.model, None, ids, EvalConfig(window_len=w, stride=1, mode="lm"))
    nll = 0.0
    for t in range(1, len(ids)):
        ctx = ids[max(0, t - w + 1):t]
        nll -= np.log(forward(tiny.model, ctx)[0].p_lm[ids[t]])
    assert rep.tokens == len(ids) - 1
    assert rep.nll == pytest.approx(nll, rel=1e-5)


def test_each_token_scored_once(tiny):
    ids = tiny.corpus.test
    for window, stride in ((32, 16), (32, 32), (16, 5)):
        rep = evaluate_ppl(tiny.model, None, ids, EvalConfig(window, stride, mode="lm"))
        assert rep.tokens == len(ids) - 1


def test_interpolated_ppl_matches_mixture(tiny):
    ids = tiny.corpus.test
    ec = EvalConfig(32, 16, 0.25, "mlp")
    rep = evaluate_ppl(tiny.model, tiny.memory, ids, ec)
    enc = encode_for_eval(tiny.model, ids, layer_index(0.7, tiny.model.cfg.n_layer), ec)
    p = tiny.memory.target_proba(enc.keys, enc.targets)
    assert rep.nll == pytest.approx(mixture_nll(enc.target_logprob, p, 0.25), rel=1e-9)
    sweep = lambda_sweep(enc, p, [0.0, 0.25], "mlp")
    assert sweep[1].nll == pytest.approx(rep.nll, rel=1e-9)
    assert sweep[0].nll == pytest.approx(evaluate_ppl(tiny.model, None, ids, EvalConfig(32, 16, mode="lm")).nll,
                                         rel=1e-9)


def test_window_longer_than_context_is_shrunk(tiny, caplog):
    rep = evaluate_ppl(tiny.model, None, tiny.corpus.test, EvalConfig(1024, 512, mode="lm"))
    assert rep.window == tiny.model.cfg.n_ctx
    assert "exceeds n_ctx" in caplog.text


def test_short_split_is_flagged(tiny):
    rep = evaluate_ppl(tiny.model, None, tiny.corpus.test[:5], EvalConfig(32, 16, mode="lm"))
    assert rep.flagged and rep.tokens == 4


def test_bench_latency_rows(tiny, rng):
    store = BruteForceIndex(rng.standard_normal((500, 16)).astype(np.float32))
    rows = bench_latency(tiny.model, tiny.memory, [tiny.ds, store], context_lengths=(8, 16, 64),
                         repetitions=3, warmup=1, k=8)
    modes = {(r.mode, r.n_ctx, r.datastore_size) for r in rows}
    assert ("lm", 8, 0) in modes and ("mlp", 16, 0) in modes and ("knn", 8, 500) in modes
    assert all(r.n_ctx <= tiny.model.cfg.n_ctx for r in rows)
    assert all(r.ms_per_token_mean > 0 for r in rows)


def test_uniform_model_perplexity_is_vocab_size(tiny):
    """A decoder whose logits are constant predicts uniformly, so PPL equals the vocabulary size."""
    m = DecoderLM(tiny.model.cfg)
    torch.nn.init.zeros_(m.wte.weight)
    rep = evaluate_ppl(m, None, tiny.corpus.test, EvalConfig(32, 16, mode="lm"))
    assert rep.ppl == pytest.approx(m.cfg.n_vocab, rel=0.05)
