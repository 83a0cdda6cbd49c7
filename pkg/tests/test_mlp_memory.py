from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mlpmem.decoder_lm import DecoderLM, LmConfig
from mlpmem.errors import DimensionMismatchError, ProvenanceError
from mlpmem.knn import SparseDistribution
from mlpmem.mlp_memory import (
    LossWeights,
    MlpConfig,
    MlpMemory,
    ce_loss,
    combined_loss,
    kl_loss,
    matched_config,
    memory_loss,
    mlp_forward,
    train_memory,
)
from mlpmem.optim import OptimSettings
from oracles import finite_difference_error


def small_memory(seed=0, **kw) -> MlpMemory:
    torch.manual_seed(seed)
    return MlpMemory(MlpConfig(**({"n_layer_mlp": 2, "d_model": 8, "d_ff": 16, "n_vocab": 13} | kw)))


def test_matched_config_is_close_to_decoder_size():
    lm = LmConfig(n_layer=4, d_model=64, n_heads=4, n_ctx=128, n_vocab=1000)
    cfg = matched_config(lm)
    lm_params = sum(p.numel() for p in DecoderLM(lm).parameters())
    mem_params = MlpMemory(cfg).num_params()
    assert abs(mem_params - lm_params) / lm_params < 0.02


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 50))
def test_output_is_a_distribution(seed, scale):
    mem = _shared_memory()
    h = np.random.default_rng(seed).standard_normal(8).astype(np.float32) * scale
    p = mlp_forward(mem, h).p_mlp
    assert abs(p.sum() - 1) < 1e-6 and (p >= 0).all()


_MEM = None


def _shared_memory() -> MlpMemory:
    global _MEM
    if _MEM is None:
        _MEM = small_memory()
    return _MEM


def test_forward_rejects_bad_width_and_nonfinite():
    mem = small_memory()
    with pytest.raises(DimensionMismatchError):
        mlp_forward(mem, np.zeros(9))
    with pytest.raises(ValueError):
        mlp_forward(mem, np.full(8, np.nan))


def test_alpha_range():
    with pytest.raises(ValueError):
        LossWeights(1.5)
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, -0.1)
    assert combined_loss(2.0, 4.0, 0.25) == pytest.approx(0.25 * 2 + 0.75 * 4)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 10))
def test_kl_nonnegative_and_zero_on_match(seed, support):
    r = np.random.default_rng(seed)
    tokens = np.sort(r.choice(20, size=support, replace=False))
    y = r.dirichlet(np.ones(support))
    target = SparseDistribution(tokens, y, 20)
    p = r.dirichlet(np.ones(20))
    assert kl_loss(target, p) >= -1e-12
    assert abs(kl_loss(target, target.to_dense())) < 1e-12


def test_losses_hand_values():
    target = SparseDistribution(np.array([0, 2]), np.array([0.5, 0.5]), 3)
    p = np.array([0.25, 0.25, 0.5])
    assert kl_loss(target, p) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(1.0))
    assert ce_loss(1, p) == pytest.approx(np.log(4))


def test_batch_loss_matches_per_example_losses(rng):
    logits = torch.from_numpy(rng.standard_normal((4, 13)))
    tok = torch.tensor([[0, 3, 0], [5, 6, 7], [1, 0, 0], [12, 2, 0]])
    prob = torch.tensor([[0.6, 0.4, 0.0], [0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]], dtype=torch.float64)
    gt = torch.tensor([0, 7, 1, 2])
    comb, kl, ce = memory_loss(logits, tok, prob, gt, 0.4)
    p = torch.softmax(logits, -1).numpy()
    kls, ces = [], []
    for r in range(4):
        n = int((prob[r] > 0).sum())
        kls.append(kl_loss(SparseDistribution(tok[r, :n].numpy(), prob[r, :n].numpy(), 13), p[r]))
        ces.append(ce_loss(int(gt[r]), p[r]))
    assert kl.item() == pytest.approx(np.mean(kls), abs=1e-12)
    assert ce.item() == pytest.approx(np.mean(ces), abs=1e-12)
    assert comb.item() == pytest.approx(combined_loss(np.mean(kls), np.mean(ces), 0.4), abs=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.4, 1.0])
def test_combined_loss_gradient_matches_finite_differences(alpha):
    mem = small_memory(seed=3).double().train()
    r = np.random.default_rng(4)
    x = torch.from_numpy(r.standard_normal((5, 8)))
    tok = torch.from_numpy(r.integers(0, 13, size=(5, 4)))
    prob = torch.from_numpy(r.dirichlet(np.ones(4), size=5))
    gt = torch.from_numpy(r.integers(0, 13, size=5))

    def f():
        return memory_loss(mem(x), tok, prob, gt, alpha)[0]

    assert finite_difference_error(mem.parameters(), f, r) < 1e-4


def test_training_reduces_loss_and_is_deterministic(tiny):
    cfg = MlpConfig(n_layer_mlp=2, d_model=16, d_ff=32, n_vocab=tiny.corpus.vocab.size)
    s = OptimSettings(steps=30, batch_size=32, lr=3e-3, warmup=2)
    m1, l1 = train_memory(tiny.targets, tiny.ds, cfg, 0.4, s, seed=1, log_every=0)
    m2, l2 = train_memory(tiny.targets, tiny.ds, cfg, 0.4, s, seed=1, log_every=0)
    assert np.mean(l1.combined[-5:]) < l1.combined[0]
    assert l1.combined == l2.combined
    assert all(torch.equal(a, b) for a, b in zip(m1.parameters(), m2.parameters()))
    assert m1.provenance["k"] == tiny.k and m1.provenance["layer_fraction"] == pytest.approx(0.7)


def test_training_rejects_foreign_targets(tiny):
    from dataclasses import replace

    from mlpmem.datastore import Datastore

    other = Datastore(tiny.ds.keys + 1, tiny.ds.values, replace(tiny.ds.meta))
    cfg = MlpConfig(n_layer_mlp=1, d_model=16, d_ff=16, n_vocab=tiny.corpus.vocab.size)
    with pytest.raises(ProvenanceError):
        train_memory(tiny.targets, other, cfg, 0.4, OptimSettings(steps=1), log_every=0)
    bad = MlpConfig(n_layer_mlp=1, d_model=8, d_ff=16, n_vocab=tiny.corpus.vocab.size)
    with pytest.raises(DimensionMismatchError):
        train_memory(tiny.targets, tiny.ds, bad, 0.4, OptimSettings(steps=1), log_every=0)


def test_eval_hook_is_called(tiny):
    cfg = MlpConfig(n_layer_mlp=1, d_model=16, d_ff=16, n_vocab=tiny.corpus.vocab.size)
    calls = []
    _, log = train_memory(tiny.targets, tiny.ds, cfg, 0.4, OptimSettings(steps=10, batch_size=16), log_every=0,
                          eval_hook=lambda m: calls.append(1) or 1.0, eval_every=4)
    assert [s for s, _ in log.evals] == [4, 8, 10] and len(calls) == 3


def test_checkpoint_round_trip(tmp_path, tiny):
    tiny.memory.save(tmp_path / "m.ckpt")
    m = MlpMemory.load(tmp_path / "m.ckpt", expected=tiny.memory.cfg)
    assert m.provenance == tiny.memory.provenance
    assert all(torch.equal(a, b) for a, b in zip(m.parameters(), tiny.memory.parameters()))
    m.save(tmp_path / "n.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_loss_reference_values():
    one_hot = SparseDistribution(np.array([0]), np.array([1.0]), 4)
    assert kl_loss(one_hot, np.array([0.5, 0.2, 0.2, 0.1])) == pytest.approx(np.log(2))
    p = np.array([np.exp(-3.0), 1 - np.exp(-3.0)])
    assert ce_loss(0, p) == pytest.approx(3.0)
    assert ce_loss(1, np.array([0.0, 1.0])) == 0.0
    assert ce_loss(2, np.full(4, 0.25)) == pytest.approx(np.log(4))
    assert combined_loss(1.0, 2.0, 0.4) == pytest.approx(1.6)
    assert combined_loss(1.0, 2.0, 0.0) == 2.0 and combined_loss(1.0, 2.0, 1.0) == 1.0


def test_pure_function_with_full_support():
    mem = small_memory()
    h = np.random.default_rng(0).standard_normal(8).astype(np.float32)
    a, b = mlp_forward(mem, h).p_mlp, mlp_forward(mem, h.copy()).p_mlp
    assert np.array_equal(a, b)
    assert (a > 0).all() and len(a) == mem.cfg.n_vocab
