"""All-MLP parametric memory trained to imitate kNN target distributions.

Each block is a pre-norm gated feed-forward layer with a residual connection
(up, gate and down projections), followed by a final norm and an untied
vocabulary head. The objective mixes KL to the kNN target with cross-entropy
to the ground-truth token: ``alpha * KL + (1 - alpha) * CE``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .datastore import Datastore
from .decoder_lm import LmConfig
from .errors import ConfigMismatchError, DimensionMismatchError, DivergenceError, ProvenanceError
from .knn import KnnTargets, SparseDistribution
from .optim import OptimSettings, make_optimizer

logger = logging.getLogger(__name__)

MEM_MAGIC = b"MMCK"
_ACTIVATIONS = {"silu": F.silu, "gelu": F.gelu, "relu": F.relu}


@dataclass
class MlpConfig:
    n_layer_mlp: int = 4
    d_model: int = 64
    d_ff: int = 256
    n_vocab: int = 1024
    activation: str = "silu"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.n_layer_mlp, self.d_model, self.d_ff, self.n_vocab) < 1:
            raise ValueError("MlpConfig sizes must be positive")


@dataclass
class LossWeights:
    alpha: float = 0.4

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class MlpOutput:
    p_mlp: np.ndarray


class GatedBlock(nn.Module):
    def __init__(self, cfg: MlpConfig) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(cfg.d_model)
        self.up = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.gate = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.down = nn.Linear(cfg.d_ff, cfg.d_model, bias=False)
        self.act = _ACTIVATIONS[cfg.activation]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        return x + self.down(self.act(self.gate(h)) * self.up(h))


class MlpMemory(nn.Module):
    def __init__(self, cfg: MlpConfig, provenance: dict | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.provenance = dict(provenance or {})
        self.blocks = nn.ModuleList(GatedBlock(cfg) for _ in range(cfg.n_layer_mlp))
        self.norm_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.n_vocab)
        for name, p in self.named_parameters():
            if p.dim() == 2:
                nn.init.normal_(p, std=0.02)
        for b in self.blocks:
            nn.init.normal_(b.down.weight, std=0.02 / (2 * cfg.n_layer_mlp) ** 0.5)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits over the vocabulary for a batch of context vectors."""
        if x.shape[-1] != self.cfg.d_model:
            raise DimensionMismatchError(f"memory expects width {self.cfg.d_model}, got {x.shape[-1]}")
        for b in self.blocks:
            x = b(x)
        return self.head(self.norm_f(x))

    @torch.no_grad()
    def log_proba(self, keys: np.ndarray, batch: int = 4096) -> np.ndarray:
        self.eval()
        dtype = next(self.parameters()).dtype
        out = [torch.log_softmax(self(torch.as_tensor(keys[s:s + batch]).to(dtype)).double(), -1).numpy()
               for s in range(0, len(keys), batch)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_vocab))

    @torch.no_grad()
    def target_proba(self, keys: np.ndarray, targets: np.ndarray, batch: int = 4096) -> np.ndarray:
        """Probability each row assigns to its target token (float64)."""
        self.eval()
        dtype = next(self.parameters()).dtype
        out = np.empty(len(keys), dtype=np.float64)
        for s in range(0, len(keys), batch):
            lp = torch.log_softmax(self(torch.as_tensor(keys[s:s + batch]).to(dtype)).double(), -1)
            tgt = torch.as_tensor(targets[s:s + batch], dtype=torch.long)
            out[s:s + batch] = lp.gather(1, tgt[:, None])[:, 0].exp().numpy()
        return out

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, {"mlp": asdict(self.cfg), "provenance": self.provenance}, path, MEM_MAGIC)

    @classmethod
    def load(cls, path: str | Path, expected: MlpConfig | None = None) -> "MlpMemory":
        meta, tensors = read_checkpoint(path, MEM_MAGIC)
        cfg = MlpConfig(**meta["mlp"])
        if expected is not None and expected != cfg:
            raise ConfigMismatchError(f"{path}: checkpoint config {cfg} != expected {expected}")
        mem = cls(cfg, meta.get("provenance"))
        load_into(mem, tensors)
        mem.eval()
        return mem


def matched_config(lm: LmConfig, n_layer_mlp: int | None = None, activation: str = "silu") -> MlpConfig:
    """Memory whose parameter count is close to the decoder's (embeddings included)."""
    n_layer_mlp = n_layer_mlp or lm.n_layer
    d, v = lm.d_model, lm.n_vocab
    lm_params = v * d + lm.n_ctx * d + lm.n_layer * (
        3 * d * lm.d_attn + 3 * lm.d_attn + lm.d_attn * d + d + 2 * d * lm.d_ff + lm.d_ff + d + 4 * d
    ) + 2 * d
    budget = lm_params - (d * v + v + 2 * d) - n_layer_mlp * 2 * d
    d_ff = max(d, budget // (3 * d * n_layer_mlp))
    return MlpConfig(n_layer_mlp, d, int(d_ff), v, activation)


def mlp_forward(memory: MlpMemory, hidden: np.ndarray) -> MlpOutput:
    hidden = np.asarray(hidden, dtype=np.float32)
    if hidden.shape[-1] != memory.cfg.d_model:
        raise DimensionMismatchError(f"memory expects width {memory.cfg.d_model}, got {hidden.shape[-1]}")
    if not np.isfinite(hidden).all():
        raise ValueError("hidden state contains non-finite values")
    return MlpOutput(np.exp(memory.log_proba(hidden.reshape(1, -1))[0]))


def kl_loss(target: SparseDistribution, p_mlp: np.ndarray) -> float:
    """KL(target || p_mlp) summed over the target's support."""
    y = np.asarray(target.probs, dtype=np.float64)
    p = np.asarray(p_mlp, dtype=np.float64)[target.tokens]
    nz = y > 0
    return float(np.sum(y[nz] * (np.log(y[nz]) - np.log(p[nz]))))


def ce_loss(ground_truth: int, p_mlp: np.ndarray) -> float:
    return float(-np.log(np.asarray(p_mlp, dtype=np.float64)[ground_truth]))


def combined_loss(kl: float, ce: float, alpha: float) -> float:
    LossWeights(alpha)
    return alpha * kl + (1.0 - alpha) * ce


def memory_loss(
    logits: torch.Tensor, tgt_tok: torch.Tensor, tgt_prob: torch.Tensor, gt: torch.Tensor, alpha: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch-mean ``(combined, kl, ce)`` for padded sparse targets (zero-probability padding)."""
    logp = torch.log_softmax(logits, dim=-1)
    y = tgt_prob.to(logp.dtype)
    kl = (torch.special.xlogy(y, y) - y * logp.gather(1, tgt_tok)).sum(1).mean()
    ce = -logp.gather(1, gt[:, None]).mean()
    return alpha * kl + (1.0 - alpha) * ce, kl, ce


@dataclass
class MemoryTrainLog:
    combined: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    ce: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)


def train_memory(
    targets: KnnTargets,
    ds: Datastore,
    cfg: MlpConfig,
    alpha: float,
    settings: OptimSettings,
    seed: int = 0,
    keys: np.ndarray | None = None,
    eval_hook: Callable[[MlpMemory], float] | None = None,
    eval_every: int = 0,
    out: str | Path | None = None,
    log_every: int = 200,
) -> tuple[MlpMemory, MemoryTrainLog]:
    """Fit the memory on ``(f(c_t), y_t, w_t)`` triples.

    Inputs come from the datastore keys unless ``keys`` (recomputed with the
    same encoder) is given. ``eval_hook`` is called every ``eval_every``
    steps and at the end; its return value is logged.
    """
    LossWeights(alpha)
    if targets.meta.datastore_hash != ds.digest():
        raise ProvenanceError("kNN targets were computed against a different datastore")
    if cfg.d_model != ds.d_model:
        raise DimensionMismatchError(f"memory d_model {cfg.d_model} != datastore d_model {ds.d_model}")
    keys = ds.keys if keys is None else np.asarray(keys, dtype=np.float32)
    if len(keys) != len(targets):
        raise DimensionMismatchError("one key per target record is required")
    order = targets.example_index
    keys_t = torch.from_numpy(np.ascontiguousarray(keys[order]))
    tok, prob = targets.padded()
    tok_t, prob_t = torch.from_numpy(tok), torch.from_numpy(prob)
    gt_t = torch.from_numpy(targets.ground_truth)

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    provenance = {
        "layer_fraction": ds.meta.layer_fraction,
        "model_hash": ds.meta.model_hash.hex(),
        "datastore_hash": targets.meta.datastore_hash.hex(),
        "k": targets.meta.k,
        "alpha": alpha,
    }
    mem = MlpMemory(cfg, provenance)
    opt, sched = make_optimizer(mem, settings)
    log = MemoryTrainLog()
    n = len(targets)
    perm, pos = rng.permutation(n), 0
    for step in range(settings.steps):
        if pos + settings.batch_size > n:
            perm, pos = rng.permutation(n), 0
        b = torch.from_numpy(perm[pos:pos + settings.batch_size])
        pos += settings.batch_size
        mem.train()
        loss, kl, ce = memory_loss(mem(keys_t[b]), tok_t[b], prob_t[b], gt_t[b], alpha)
        if not torch.isfinite(loss):
            raise DivergenceError(f"train-memory: non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(mem.parameters(), settings.grad_clip)
        opt.step()
        sched.step()
        log.combined.append(loss.item())
        log.kl.append(kl.item())
        log.ce.append(ce.item())
        if log_every and step % log_every == 0:
            logger.info("train-memory step %d loss %.4f (kl %.4f ce %.4f)", step, log.combined[-1],
                        log.kl[-1], log.ce[-1])
        if eval_hook is not None and eval_every and (step + 1) % eval_every == 0 and step + 1 < settings.steps:
            log.evals.append((step + 1, eval_hook(mem)))
    mem.eval()
    if eval_hook is not None:
        log.evals.append((settings.steps, eval_hook(mem)))
    if out is not None:
        mem.save(out)
    return mem, log
