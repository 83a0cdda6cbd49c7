"""Interpolated prediction, sliding-window perplexity and latency benchmarking.

Three systems are compared: the decoder alone (``lm``), the decoder
interpolated with a kNN distribution (``knn``) and the decoder interpolated
with the MLP memory (``mlp``).
"""
from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datastore import Datastore, model_digest
from .decoder_lm import DecoderLM, StreamEncoding, encode_stream, forward, layer_index
from .errors import ProvenanceError
from .knn import BruteForceIndex, _index_for, interpolate, knn_distribution, knn_search, knn_target_probs
from .mlp_memory import MlpMemory

logger = logging.getLogger(__name__)

MODES = ("lm", "knn", "mlp")
_MODE_ALIASES = {"lm-only": "lm", "knn-lm": "knn", "mlp-mem": "mlp"}


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class EvalConfig:
    window_len: int = 1024
    stride: int = 512
    lam: float = 0.25
    mode: str = "mlp"
    k: int = 1024

    def __post_init__(self) -> None:
        self.mode = normalize_mode(self.mode)
        if not 0 < self.stride <= self.window_len:
            raise ValueError("scored suffix must be in [1, window_len]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class PerplexityReport:
    mode: str
    lam: float
    k: int | None
    window: int
    split: str
    tokens: int
    nll: float
    flagged: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def ppl(self) -> float:
        return math.exp(self.nll / self.tokens) if self.tokens else float("nan")

    def row(self) -> dict:
        return {"mode": self.mode, "lambda": self.lam, "k": "" if self.k is None else self.k,
                "window": self.window, "split": self.split, "ppl": self.ppl, "nll": self.nll,
                "tokens": self.tokens}


PPL_COLUMNS = ["mode", "lambda", "k", "window", "split", "ppl", "nll", "tokens"]
LATENCY_COLUMNS = ["mode", "n_ctx", "datastore_size", "ms_per_token_mean", "stdev"]


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def check_memory_provenance(model: DecoderLM, memory: MlpMemory) -> float:
    """Return the memory's input layer fraction after checking it was trained on this encoder."""
    prov = memory.provenance
    if "model_hash" in prov and prov["model_hash"] != model_digest(model).hex():
        raise ProvenanceError("memory was trained on keys from a different decoder")
    if memory.cfg.d_model != model.cfg.d_model:
        raise ProvenanceError("memory width does not match the decoder")
    return float(prov.get("layer_fraction", 1.0))


def check_datastore_provenance(model: DecoderLM, ds: Datastore) -> None:
    if ds.meta.model_hash != model_digest(model):
        raise ProvenanceError("datastore was built with a different decoder")


def predict(
    model: DecoderLM,
    aux: MlpMemory | Datastore | None,
    context: Sequence[int],
    lam: float = 0.25,
    mode: str = "mlp",
    k: int = 1024,
) -> np.ndarray:
    """Dense next-token distribution ``lam * p_aux + (1 - lam) * p_LM``; ``lm`` ignores ``lam``."""
    mode = normalize_mode(mode)
    out, hidden = forward(model, context)
    if mode == "lm":
        return out.p_lm
    if mode == "mlp":
        if not isinstance(aux, MlpMemory):
            raise TypeError("mode 'mlp' needs an MlpMemory")
        frac = check_memory_provenance(model, aux)
        h = hidden[layer_index(frac, model.cfg.n_layer) - 1].vector
        p_aux = np.exp(aux.log_proba(h[None, :])[0])
    else:
        if not isinstance(aux, Datastore):
            raise TypeError("mode 'knn' needs a Datastore")
        check_datastore_provenance(model, aux)
        h = hidden[layer_index(aux.meta.layer_fraction, model.cfg.n_layer) - 1].vector
        p_aux = knn_distribution(knn_search(aux, h, k), model.cfg.n_vocab).to_dense()
    return interpolate(p_aux, out.p_lm, lam)


def mixture_nll(lm_logprob: np.ndarray, aux_prob: np.ndarray | None, lam: float) -> float:
    """Total NLL (float64) of ``lam * p_aux + (1 - lam) * p_LM`` at the target tokens."""
    lm_logprob = np.asarray(lm_logprob, dtype=np.float64)
    if aux_prob is None or lam == 0.0:
        return float(-lm_logprob.sum())
    p = lam * np.asarray(aux_prob, dtype=np.float64) + (1.0 - lam) * np.exp(lm_logprob)
    return float(-np.log(p).sum())


def encode_for_eval(model: DecoderLM, ids: np.ndarray, layer: int | None, cfg: EvalConfig) -> StreamEncoding:
    window = min(cfg.window_len, model.cfg.n_ctx)
    stride = min(cfg.stride, max(1, window - 1))
    enc = encode_stream(model, ids, layer=layer, window_len=window, stride=stride)
    enc.extra["window"] = window
    enc.extra["flagged"] = len(ids) < window
    return enc


def evaluate_ppl(
    model: DecoderLM,
    aux: MlpMemory | Datastore | None,
    ids: np.ndarray,
    cfg: EvalConfig,
    split: str = "test",
) -> PerplexityReport:
    """Sliding-window perplexity of ``cfg.mode`` over a token stream.

    Windows of ``window_len`` tokens advance by ``stride``; only targets not
    scored by an earlier window count, so each token is scored exactly once.
    A window longer than the decoder's context is shrunk to ``n_ctx``.
    """
    if cfg.window_len > model.cfg.n_ctx:
        logger.warning("eval window %d exceeds n_ctx=%d; using n_ctx", cfg.window_len, model.cfg.n_ctx)
    layer = None
    if cfg.mode == "mlp":
        layer = layer_index(check_memory_provenance(model, aux), model.cfg.n_layer)
    elif cfg.mode == "knn":
        check_datastore_provenance(model, aux)
        layer = layer_index(aux.meta.layer_fraction, model.cfg.n_layer)
    enc = encode_for_eval(model, ids, layer, cfg)
    if enc.extra["flagged"]:
        logger.warning("%s split (%d tokens) is shorter than the window; single truncated window", split, len(ids))
    return _report(enc, aux, cfg, split)


def _report(enc: StreamEncoding, aux, cfg: EvalConfig, split: str) -> PerplexityReport:
    aux_prob = None
    k = None
    if cfg.mode == "mlp":
        aux_prob = aux.target_proba(enc.keys, enc.targets)
    elif cfg.mode == "knn":
        k = cfg.k
        aux_prob = knn_target_probs(_index_for(aux), aux.values, enc.keys, enc.targets, [cfg.k])[cfg.k]
    lam = 0.0 if cfg.mode == "lm" else cfg.lam
    nll = mixture_nll(enc.target_logprob, aux_prob, lam)
    return PerplexityReport(cfg.mode, cfg.lam if cfg.mode != "lm" else 0.0, k, enc.extra.get("window", cfg.window_len),
                            split, len(enc.targets), nll, bool(enc.extra.get("flagged", False)))


def lambda_sweep(enc: StreamEncoding, aux_prob: np.ndarray | None, lams: Sequence[float], mode: str,
                 split: str = "test", k: int | None = None) -> list[PerplexityReport]:
    """Reports for several lambdas from one encoding (the decoder runs once)."""
    return [PerplexityReport(mode, lam, k, enc.extra.get("window", 0), split, len(enc.targets),
                             mixture_nll(enc.target_logprob, aux_prob, lam)) for lam in lams]


def k_sweep(enc: StreamEncoding, ds: Datastore, ks: Sequence[int], lam: float,
            split: str = "test") -> list[PerplexityReport]:
    probs = knn_target_probs(_index_for(ds), ds.values, enc.keys, enc.targets, ks)
    return [PerplexityReport("knn", lam, k, enc.extra.get("window", 0), split, len(enc.targets),
                             mixture_nll(enc.target_logprob, probs[k], lam)) for k in sorted(probs)]


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyRow:
    mode: str
    n_ctx: int
    datastore_size: int
    ms_per_token_mean: float
    stdev: float
    ms_median: float
    aux_ms_median: float
    aux_ms_mean: float
    aux_stdev: float

    def row(self) -> dict:
        return asdict(self)


def _time_ms(fn, reps: int, warmup: int) -> list[float]:
    return _time_interleaved([fn], reps, warmup)[0]


def _time_interleaved(fns: Sequence, reps: int, warmup: int, burst: int = 1, settle: int = 0) -> list[list[float]]:
    """Time each callable ``reps`` times in round-robin bursts, so drift hits all of them alike.

    Each burst of ``burst`` timed calls is preceded by ``settle`` untimed calls,
    which restore the callable's working set after the others ran.
    """
    for _ in range(warmup):
        for fn in fns:
            fn()
    out: list[list[float]] = [[] for _ in fns]
    while len(out[0]) < reps:
        for fn, t in zip(fns, out):
            for _ in range(settle):
                fn()
            for _ in range(min(burst, reps - len(t))):
                t0 = time.perf_counter()
                fn()
                t.append((time.perf_counter() - t0) * 1e3)
    return out


@torch.no_grad()
def bench_latency(
    model: DecoderLM,
    memory: MlpMemory | None,
    datastores: Sequence[Datastore | BruteForceIndex] = (),
    modes: Sequence[str] = MODES,
    context_lengths: Sequence[int] = (128, 512, 1024),
    repetitions: int = 50,
    warmup: int = 10,
    k: int = 1024,
    layer: int | None = None,
    seed: int = 0,
) -> list[LatencyRow]:
    """Wall-clock cost of producing one next-token distribution, single-threaded.

    The decoder recomputes the full context each step (no KV cache). The
    auxiliary cost (memory forward or datastore scan on one query vector) is
    timed separately, interleaved across context lengths, as well as within
    the end-to-end step.
    """
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        model.eval()
        rng = np.random.default_rng(seed)
        layer = layer or model.cfg.n_layer
        modes = [normalize_mode(m) for m in modes]
        indexes = [ds if isinstance(ds, BruteForceIndex) else _index_for(ds) for ds in datastores]
        ctxs, queries = [], []
        for n_ctx in context_lengths:
            if n_ctx > model.cfg.n_ctx:
                logger.warning("skipping n_ctx=%d > model n_ctx=%d", n_ctx, model.cfg.n_ctx)
                continue
            ctx = torch.from_numpy(rng.integers(0, model.cfg.n_vocab, size=(1, n_ctx)))
            _, hidden = model(ctx, return_hidden=True)
            h = hidden[layer - 1][:, -1].contiguous()
            knn_q = [h.numpy().copy() if ix.dim == h.shape[1] else rng.standard_normal((1, ix.dim)).astype(np.float32)
                     for ix in indexes]
            ctxs.append((n_ctx, ctx))
            queries.append((h, knn_q))

        def lm_step(ctx):
            logits, hs = model(ctx, return_hidden=True)
            torch.softmax(logits[0, -1], -1)
            return hs[layer - 1][:, -1]

        def mlp_aux(h):
            return lambda: torch.softmax(memory(h), -1)

        def knn_aux(ix, q):
            return lambda: ix.search(q, k)

        # datastores alternate in short bursts after untimed settle calls, so a large
        # scan does not leave a small store cold for its timed queries
        aux: dict[tuple[str, int, int], list[float]] = {}
        if "mlp" in modes and memory is not None:
            arms = [(("mlp", n_ctx, 0), mlp_aux(h)) for (n_ctx, _), (h, _) in zip(ctxs, queries)]
            times = _time_interleaved([fn for _, fn in arms], repetitions, warmup)
            aux.update({key: t for (key, _), t in zip(arms, times)})
        if "knn" in modes and indexes:
            arms = [(("knn", n_ctx, len(ix)), knn_aux(ix, q))
                    for (n_ctx, _), (_, qs) in zip(ctxs, queries) for ix, q in zip(indexes, qs)]
            times = _time_interleaved([fn for _, fn in arms], repetitions, warmup, burst=5, settle=2)
            aux.update({key: t for (key, _), t in zip(arms, times)})

        rows: list[LatencyRow] = []
        for (n_ctx, ctx), (h, qs) in zip(ctxs, queries):
            for mode in modes:
                if mode == "lm":
                    t = _time_ms(lambda: lm_step(ctx), repetitions, warmup)
                    rows.append(LatencyRow("lm", n_ctx, 0, statistics.fmean(t), statistics.stdev(t),
                                           statistics.median(t), 0.0, 0.0, 0.0))
                elif mode == "mlp" and memory is not None:
                    ta = aux[("mlp", n_ctx, 0)]
                    t = _time_ms(lambda: torch.softmax(memory(lm_step(ctx)), -1), repetitions, warmup)
                    rows.append(LatencyRow("mlp", n_ctx, 0, statistics.fmean(t), statistics.stdev(t),
                                           statistics.median(t), statistics.median(ta), statistics.fmean(ta),
                                           statistics.stdev(ta)))
                elif mode == "knn":
                    for ix, q in zip(indexes, qs):
                        ta = aux[("knn", n_ctx, len(ix))]

                        def step(ix=ix, q=q):
                            lm_step(ctx)
                            ix.search(q, k)

                        t = _time_ms(step, repetitions, warmup)
                        rows.append(LatencyRow("knn", n_ctx, len(ix), statistics.fmean(t), statistics.stdev(t),
                                               statistics.median(t), statistics.median(ta), statistics.fmean(ta),
                                               statistics.stdev(ta)))
        return rows
    finally:
        torch.set_num_threads(threads)
