"""A small GPT-2-style decoder: pre-layernorm blocks, learned positions, tied embeddings.

Besides next-token distributions the model exposes every block's output (the
residual stream after attention + FFN, before the final layernorm). One of
those block outputs is the context encoder used for datastore keys and as the
MLP memory's input.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .corpus import TokenizedCorpus
from .errors import ConfigMismatchError, ContextTooLongError, DivergenceError, VocabMismatchError
from .optim import OptimSettings, make_optimizer

logger = logging.getLogger(__name__)

LM_MAGIC = b"LMCK"


@dataclass
class LmConfig:
    n_layer: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_ctx: int = 128
    n_vocab: int = 1024
    d_attn: int | None = None
    d_ff: int | None = None

    def __post_init__(self) -> None:
        if self.d_attn is None:
            self.d_attn = self.d_model
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_attn % self.n_heads:
            raise ValueError(f"d_attn={self.d_attn} not divisible by n_heads={self.n_heads}")
        if min(self.n_layer, self.d_model, self.n_heads, self.n_vocab) < 1 or self.n_ctx < 0:
            raise ValueError("LmConfig sizes must be positive")

    @property
    def is_standard_shape(self) -> bool:
        return self.d_attn == self.d_model and self.d_ff == 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LmOutput:
    logits: np.ndarray
    p_lm: np.ndarray


@dataclass
class HiddenState:
    vector: np.ndarray
    layer_index: int
    position: int


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: LmConfig) -> None:
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_attn)
        self.proj = nn.Linear(cfg.d_attn, cfg.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (t.view(B, T, self.n_heads, -1).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.proj(y.transpose(1, 2).reshape(B, T, -1))


class Block(nn.Module):
    def __init__(self, cfg: LmConfig) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc_out = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc_out(F.gelu(self.fc(self.ln2(x))))


class DecoderLM(nn.Module):
    def __init__(self, cfg: LmConfig) -> None:
        super().__init__()
        if cfg.n_ctx < 1:
            raise ValueError("a model needs n_ctx >= 1")
        self.cfg = cfg
        self.wte = nn.Embedding(cfg.n_vocab, cfg.d_model)
        self.wpe = nn.Embedding(cfg.n_ctx, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layer))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.apply(self._init)
        # GPT-2 scaling of residual projections
        for name, p in self.named_parameters():
            if name.endswith(("proj.weight", "fc_out.weight")):
                nn.init.normal_(p, std=0.02 / math.sqrt(2 * cfg.n_layer))

    @staticmethod
    def _init(m: nn.Module) -> None:
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)

    def forward(
        self, idx: torch.Tensor, upto_layer: int | None = None, return_hidden: bool = False
    ) -> tuple[torch.Tensor | None, list[torch.Tensor]]:
        """Return ``(logits, hidden)``.

        ``hidden[i]`` is the output of block ``i + 1``. With ``upto_layer`` set,
        computation stops after that block and logits are ``None``.
        """
        T = idx.shape[-1]
        if T > self.cfg.n_ctx:
            raise ContextTooLongError(f"context of {T} tokens exceeds n_ctx={self.cfg.n_ctx}")
        pos = torch.arange(T, device=idx.device)
        x = self.wte(idx) + self.wpe(pos)
        hidden: list[torch.Tensor] = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if return_hidden or upto_layer == i:
                hidden.append(x)
            if upto_layer == i:
                return None, hidden
        logits = F.linear(self.ln_f(x), self.wte.weight)
        return logits, hidden

    def num_params(self, non_embedding: bool = True) -> int:
        n = sum(p.numel() for p in self.parameters())
        if non_embedding:
            n -= self.wte.weight.numel() + self.wpe.weight.numel()
        return n

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, self.cfg.to_dict(), path, LM_MAGIC)

    @classmethod
    def load(cls, path: str | Path, expected: LmConfig | None = None) -> "DecoderLM":
        cfg_dict, tensors = read_checkpoint(path, LM_MAGIC)
        cfg = LmConfig(**cfg_dict)
        if expected is not None and expected != cfg:
            raise ConfigMismatchError(f"{path}: checkpoint config {cfg} != expected {expected}")
        model = cls(cfg)
        load_into(model, tensors)
        model.eval()
        return model


def layer_index(layer_fraction: float, n_layer: int) -> int:
    """Block index (1-based) at ``layer_fraction`` of the depth, rounded half-up and clamped."""
    if not 0.0 < layer_fraction <= 1.0:
        raise ValueError(f"layer_fraction must be in (0, 1], got {layer_fraction}")
    # the epsilon absorbs binary error, including a fraction stored as float32
    # (0.7 -> 0.699999988, and 0.699999988 * 5 + 0.5 < 4)
    idx = math.floor(layer_fraction * n_layer + 0.5 + 1e-6 * max(1, n_layer))
    return min(max(idx, 1), n_layer)


@torch.no_grad()
def forward(model: DecoderLM, context: np.ndarray | list[int]) -> tuple[LmOutput, list[HiddenState]]:
    """Next-token distribution after ``context`` plus every block's output at the last position."""
    ids = torch.as_tensor(np.asarray(context, dtype=np.int64))[None, :]
    if ids.shape[1] == 0:
        raise ValueError("context must contain at least one token")
    logits, hidden = model(ids, return_hidden=True)
    last = logits[0, -1].double()
    p = torch.softmax(last, dim=-1)
    pos = ids.shape[1] - 1
    states = [HiddenState(h[0, -1].float().numpy().copy(), i + 1, pos) for i, h in enumerate(hidden)]
    return LmOutput(last.numpy(), p.numpy()), states


def sliding_windows(length: int, window_len: int, stride: int) -> Iterator[tuple[int, int, int]]:
    """Yield ``(begin, end, first_scored)`` covering targets ``1 .. length-1`` exactly once.

    The window holds tokens ``[begin, end)``; targets ``[first_scored, end)``
    are predicted from inside it, each conditioning on at most
    ``window_len - 1`` earlier tokens. Windows advance by ``stride``.
    """
    if not 0 < stride <= window_len - 1 and length > window_len:
        raise ValueError("stride must be in [1, window_len - 1]")
    if length < 2:
        return
    begin, prev_end = 0, 1
    while True:
        end = min(begin + window_len, length)
        yield begin, end, max(prev_end, begin + 1)
        prev_end = end
        if end >= length:
            return
        begin += stride


@dataclass
class StreamEncoding:
    """Per-example quantities for a token stream; row ``i`` is the example whose target is token ``i + 1``."""

    targets: np.ndarray
    keys: np.ndarray | None = None
    target_logprob: np.ndarray | None = None
    logprobs: np.ndarray | None = None
    layer: int | None = None
    extra: dict = field(default_factory=dict)


@torch.no_grad()
def encode_stream(
    model: DecoderLM,
    ids: np.ndarray,
    layer: int | None = None,
    window_len: int | None = None,
    stride: int | None = None,
    need_logprobs: bool = True,
    full_logprobs: bool = False,
    batch_size: int = 16,
) -> StreamEncoding:
    """Run the model over ``ids`` in sliding windows, one forward pass per window.

    Returns block-``layer`` keys (float32), the log-probability of each target
    under the LM (float64) and optionally the full log-distribution.
    """
    model.eval()
    cfg = model.cfg
    window_len = window_len or cfg.n_ctx
    stride = stride or max(1, window_len // 2)
    if window_len > cfg.n_ctx:
        raise ContextTooLongError(f"window {window_len} exceeds n_ctx={cfg.n_ctx}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and ids.max() >= cfg.n_vocab:
        raise VocabMismatchError("token ids exceed the model vocabulary")
    n = max(len(ids) - 1, 0)
    enc = StreamEncoding(targets=ids[1:].copy(), layer=layer)
    if layer is not None:
        enc.keys = np.zeros((n, cfg.d_model), dtype=np.float32)
    if need_logprobs:
        enc.target_logprob = np.zeros(n, dtype=np.float64)
    if full_logprobs:
        enc.logprobs = np.zeros((n, cfg.n_vocab), dtype=np.float32)
    upto = layer if not (need_logprobs or full_logprobs) else None

    windows = list(sliding_windows(len(ids), window_len, stride))
    # group equal-length windows so they can be batched
    groups: dict[int, list[tuple[int, int, int]]] = {}
    for w in windows:
        groups.setdefault(w[1] - w[0], []).append(w)
    for wlen, ws in groups.items():
        for s in range(0, len(ws), batch_size):
            chunk = ws[s:s + batch_size]
            batch = torch.from_numpy(np.stack([ids[b:e] for b, e, _ in chunk]))
            logits, hidden = model(batch, upto_layer=upto, return_hidden=layer is not None and upto is None)
            h = None
            if layer is not None:
                h = hidden[0] if upto is not None else hidden[layer - 1]
            logp = torch.log_softmax(logits.double(), dim=-1) if logits is not None else None
            for row, (b, e, first) in enumerate(chunk):
                # target j is predicted from window position j - 1 - b; example index is j - 1
                src = slice(first - 1 - b, e - 1 - b)
                dst = slice(first - 1, e - 1)
                if h is not None:
                    enc.keys[dst] = h[row, src].float().numpy()
                if logp is not None:
                    tgt = torch.from_numpy(ids[first:e])
                    lp = logp[row, src]
                    if need_logprobs:
                        enc.target_logprob[dst] = lp.gather(1, tgt[:, None])[:, 0].numpy()
                    if full_logprobs:
                        enc.logprobs[dst] = lp.float().numpy()
    return enc


def extract_keys(
    model: DecoderLM,
    corpus: TokenizedCorpus,
    split: str,
    layer_fraction: float,
    window_len: int | None = None,
    stride: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(keys, values)``: the chosen block's output for each example and its target."""
    if corpus.vocab.size != model.cfg.n_vocab:
        raise VocabMismatchError(f"corpus vocab {corpus.vocab.size} != model n_vocab {model.cfg.n_vocab}")
    layer = layer_index(layer_fraction, model.cfg.n_layer)
    enc = encode_stream(model, corpus.split(split), layer=layer, window_len=window_len,
                        stride=stride, need_logprobs=False)
    return enc.keys, enc.targets


def lm_loss(model: DecoderLM, batch: torch.Tensor) -> torch.Tensor:
    logits, _ = model(batch[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))


def sample_batch(ids: np.ndarray, seq_len: int, batch_size: int, rng: np.random.Generator) -> torch.Tensor:
    """Random windows of ``seq_len + 1`` tokens (inputs plus shifted targets)."""
    span = min(seq_len + 1, len(ids))
    starts = rng.integers(0, len(ids) - span + 1, size=batch_size)
    return torch.from_numpy(np.stack([ids[s:s + span] for s in starts]))


def train_lm(
    corpus: TokenizedCorpus,
    cfg: LmConfig,
    settings: OptimSettings,
    seed: int = 0,
    out: str | Path | None = None,
    log_every: int = 100,
) -> tuple[DecoderLM, list[float]]:
    """Standard next-token training on the train split; returns the model and per-step losses."""
    if cfg.n_vocab != corpus.vocab.size:
        raise VocabMismatchError(f"config n_vocab {cfg.n_vocab} != corpus vocab {corpus.vocab.size}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = DecoderLM(cfg)
    opt, sched = make_optimizer(model, settings)
    train = corpus.train
    losses: list[float] = []
    model.train()
    for step in range(settings.steps):
        batch = sample_batch(train, cfg.n_ctx, settings.batch_size, rng)
        loss = lm_loss(model, batch)
        if not torch.isfinite(loss):
            raise DivergenceError(f"train-lm: non-finite loss {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            logger.info("train-lm step %d loss %.4f", step, losses[-1])
    model.eval()
    if out is not None:
        model.save(out)
    return model, losses
