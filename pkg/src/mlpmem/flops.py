"""Per-token inference FLOPs for a decoder transformer and an all-MLP memory.

Counting convention: a multiply-accumulate is 2 FLOPs, so a d_in x d_out
projection costs 2 * d_in * d_out per token.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .decoder_lm import LmConfig


@dataclass(frozen=True)
class FlopsBreakdown:
    embed: int
    attn_qkv: int
    attn_mask: int
    attn_project: int
    feedforward: int
    deembed: int

    @property
    def non_embedding(self) -> int:
        return self.attn_qkv + self.attn_mask + self.attn_project + self.feedforward

    @property
    def total(self) -> int:
        return self.non_embedding + self.embed + self.deembed


def transformer_breakdown(cfg: LmConfig, n_ctx: int | None = None) -> FlopsBreakdown:
    n_ctx = cfg.n_ctx if n_ctx is None else n_ctx
    L, d, da, dff = cfg.n_layer, cfg.d_model, cfg.d_attn, cfg.d_ff
    return FlopsBreakdown(
        embed=4 * d,
        attn_qkv=2 * L * d * 3 * da,
        attn_mask=2 * L * n_ctx * da,
        attn_project=2 * L * da * d,
        feedforward=2 * L * 2 * d * dff,
        deembed=2 * d * cfg.n_vocab,
    )


def mlp_breakdown(n_layer: int, d_model: int, d_ff: int, n_vocab: int) -> FlopsBreakdown:
    # gated block: up, gate and down projections
    return FlopsBreakdown(
        embed=0,
        attn_qkv=0,
        attn_mask=0,
        attn_project=0,
        feedforward=3 * n_layer * 2 * d_model * d_ff,
        deembed=2 * d_model * n_vocab,
    )


def flops_per_token(
    cfg: LmConfig, mode: str = "transformer", n_ctx: int | None = None, include_embedding: bool = False
) -> int:
    """FLOPs per generated token.

    ``mode="mlp"`` prices an all-MLP network with the same ``n_layer``,
    ``d_model`` and ``d_ff``.
    """
    if mode == "transformer":
        b = transformer_breakdown(cfg, n_ctx)
    elif mode == "mlp":
        b = mlp_breakdown(cfg.n_layer, cfg.d_model, cfg.d_ff, cfg.n_vocab)
    else:
        raise ValueError(f"mode must be 'transformer' or 'mlp', got {mode!r}")
    return b.total if include_embedding else b.non_embedding


@dataclass(frozen=True)
class SpeedRatio:
    value: float
    exact: Fraction
    closed_form: bool


def speed_ratio(cfg: LmConfig, n_ctx: int | None = None) -> SpeedRatio:
    """Transformer-to-MLP FLOPs ratio (non-embedding).

    For the standard shape this is ``1 + n_ctx / (12 d_model)``; otherwise the
    full row sums are divided and ``closed_form`` is False.
    """
    n_ctx = cfg.n_ctx if n_ctx is None else n_ctx
    if cfg.is_standard_shape:
        exact = 1 + Fraction(n_ctx, 12 * cfg.d_model)
        return SpeedRatio(float(exact), exact, True)
    exact = Fraction(flops_per_token(cfg, "transformer", n_ctx), flops_per_token(cfg, "mlp"))
    return SpeedRatio(float(exact), exact, False)
