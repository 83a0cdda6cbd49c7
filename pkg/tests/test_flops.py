from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlpmem.decoder_lm import LmConfig
from mlpmem.flops import flops_per_token, mlp_breakdown, speed_ratio, transformer_breakdown

GPT2_SMALL = dict(n_layer=12, d_model=768, n_heads=12, n_vocab=50257)


def table_row_sums(cfg: LmConfig, n_ctx: int) -> tuple[int, int]:
    """Non-embedding transformer and MLP FLOPs written directly from the row formulas."""
    L, d, da, dff = cfg.n_layer, cfg.d_model, cfg.d_attn, cfg.d_ff
    transformer = 2 * L * d * 3 * da + 2 * L * n_ctx * da + 2 * L * da * d + 2 * L * 2 * d * dff
    mlp = 3 * L * 2 * d * dff
    return transformer, mlp


def test_gpt2_small_counts():
    cfg = LmConfig(n_ctx=0, **GPT2_SMALL)
    assert flops_per_token(cfg, "transformer", 0) == 4 * 12 * 768 * (2 * 768 + 3072) == 169_869_312
    assert flops_per_token(cfg, "mlp") == 6 * 12 * 768 * 3072 == 169_869_312


def test_embedding_terms():
    cfg = LmConfig(n_ctx=0, **GPT2_SMALL)
    assert flops_per_token(cfg, "transformer", 0, include_embedding=True) == 169_869_312 + 4 * 768 + 2 * 768 * 50257
    assert flops_per_token(cfg, "mlp", include_embedding=True) == 169_869_312 + 2 * 768 * 50257


def test_ratio_values():
    assert speed_ratio(LmConfig(n_ctx=0, **GPT2_SMALL)).value == 1.0
    r = speed_ratio(LmConfig(n_ctx=512, **GPT2_SMALL))
    assert r.closed_form and r.exact == Fraction(19, 18)
    assert r.value == pytest.approx(1.0556, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 96), st.integers(1, 64), st.integers(0, 8192))
def test_closed_form_equals_row_sum_ratio(n_layer, width, n_ctx):
    cfg = LmConfig(n_layer=n_layer, d_model=8 * width, n_heads=8, n_ctx=n_ctx, n_vocab=100)
    t, m = table_row_sums(cfg, n_ctx)
    assert speed_ratio(cfg, n_ctx).exact == Fraction(t, m)
    assert flops_per_token(cfg, "transformer", n_ctx) == t and flops_per_token(cfg, "mlp") == m


def test_ratio_increases_with_context():
    cfg = LmConfig(**GPT2_SMALL)
    vals = [speed_ratio(cfg, n).exact for n in (0, 1, 128, 1024, 4096)]
    assert vals == sorted(vals) and len(set(vals)) == len(vals)


def test_nonstandard_shape_uses_row_sums():
    cfg = LmConfig(n_layer=2, d_model=64, n_heads=4, d_ff=100, n_ctx=32, n_vocab=10)
    r = speed_ratio(cfg)
    t, m = table_row_sums(cfg, 32)
    assert not r.closed_form and r.exact == Fraction(t, m)


def test_breakdown_rows():
    cfg = LmConfig(n_layer=2, d_model=8, n_heads=2, n_ctx=4, n_vocab=10)
    b = transformer_breakdown(cfg)
    assert (b.attn_qkv, b.attn_mask, b.attn_project, b.feedforward) == (768, 128, 256, 2048)
    assert mlp_breakdown(2, 8, 32, 10).feedforward == 3072


def test_unknown_mode():
    with pytest.raises(ValueError):
        flops_per_token(LmConfig(), "rnn")
