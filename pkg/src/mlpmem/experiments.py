"""Sweeps and ablations built on a finished (or partially finished) run.

Every function returns plain row dicts ready for ``write_csv``; the column
lists next to each function document the headers.
"""
from __future__ import annotations

import logging
import tempfile
import time
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .corpus import TokenizedCorpus
from .datastore import Datastore, build_datastore
from .decoder_lm import DecoderLM, LmConfig, encode_stream, layer_index, train_lm
from .flops import flops_per_token, mlp_breakdown
from .inference import (
    EvalConfig,
    check_datastore_provenance,
    check_memory_provenance,
    encode_for_eval,
    k_sweep,
    mixture_nll,
    normalize_mode,
)
from .knn import KnnTargets, _index_for, knn_distribution_from, knn_target_probs, precompute_targets, read_targets
from .mlp_memory import MlpConfig, MlpMemory, matched_config, train_memory
from .optim import OptimSettings

logger = logging.getLogger(__name__)

ALPHA_COLUMNS = ["alpha", "lambda", "split", "ppl", "memory_ppl", "final_loss"]
K_COLUMNS = ["k", "lambda", "split", "ppl"]
LAMBDA_COLUMNS = ["mode", "lambda", "split", "ppl"]
LAYER_COLUMNS = ["layer_fraction", "layer", "lambda", "split", "ppl_lm", "ppl_knn", "ppl_mlp"]
SCALING_COLUMNS = ["system", "n_layer", "d_model", "params", "tokens", "compute",
                   "compute_with_precompute", "ppl"]


def _ppl(nll: float, n: int) -> float:
    return float(np.exp(nll / n))


def alpha_sweep(
    model: DecoderLM,
    ds: Datastore,
    targets_path: str | Path,
    ids: np.ndarray,
    mlp_cfg: MlpConfig,
    alphas: Sequence[float],
    settings: OptimSettings,
    lam: float = 0.25,
    eval_cfg: EvalConfig | None = None,
    split: str = "valid",
    seed: int = 0,
    trained: Mapping[float, MlpMemory] | None = None,
) -> list[dict]:
    """Train one memory per ``alpha`` on the same targets and score the interpolation on ``ids``.

    ``trained`` supplies already-fitted memories by alpha; those are scored
    without retraining and their ``final_loss`` is left blank.
    """
    eval_cfg = eval_cfg or EvalConfig(window_len=model.cfg.n_ctx, stride=model.cfg.n_ctx // 2, lam=lam)
    targets = read_targets(targets_path)
    enc = encode_for_eval(model, ids, layer_index(ds.meta.layer_fraction, model.cfg.n_layer), eval_cfg)
    rows = []
    trained = dict(trained or {})
    for a in alphas:
        if a in trained:
            mem, final = trained[a], ""
        else:
            mem, log = train_memory(targets, ds, mlp_cfg, a, settings, seed=seed, log_every=0)
            final = float(np.mean(log.combined[-20:]))
        p = mem.target_proba(enc.keys, enc.targets)
        rows.append({"alpha": a, "lambda": lam, "split": split,
                     "ppl": _ppl(mixture_nll(enc.target_logprob, p, lam), len(p)),
                     "memory_ppl": _ppl(-np.log(p).sum(), len(p)),
                     "final_loss": final})
        logger.info("alpha %.2f: ppl %.4f", a, rows[-1]["ppl"])
    return rows


def k_sweep_rows(model: DecoderLM, ds: Datastore, ids: np.ndarray, ks: Sequence[int], lam: float = 0.25,
                 eval_cfg: EvalConfig | None = None, split: str = "test") -> list[dict]:
    """kNN-LM perplexity for each ``k``, from a single encoding and a single search at ``max(ks)``."""
    eval_cfg = eval_cfg or EvalConfig(window_len=model.cfg.n_ctx, stride=model.cfg.n_ctx // 2, lam=lam)
    enc = encode_for_eval(model, ids, layer_index(ds.meta.layer_fraction, model.cfg.n_layer), eval_cfg)
    return [{"k": r.k, "lambda": lam, "split": split, "ppl": r.ppl} for r in k_sweep(enc, ds, ks, lam, split)]


def lambda_sweep_rows(model: DecoderLM, aux: MlpMemory | Datastore | None, ids: np.ndarray, mode: str,
                      lams: Sequence[float], k: int = 1024, split: str = "valid") -> list[dict]:
    """Interpolated perplexity for each ``lambda`` from one encoding and one auxiliary pass."""
    mode = normalize_mode(mode)
    ec = EvalConfig(window_len=model.cfg.n_ctx, stride=model.cfg.n_ctx // 2, mode=mode, k=k)
    layer = None
    if mode == "mlp":
        layer = layer_index(check_memory_provenance(model, aux), model.cfg.n_layer)
    elif mode == "knn":
        check_datastore_provenance(model, aux)
        layer = layer_index(aux.meta.layer_fraction, model.cfg.n_layer)
    enc = encode_for_eval(model, ids, layer, ec)
    if mode == "mlp":
        p = aux.target_proba(enc.keys, enc.targets)
    elif mode == "knn":
        p = knn_target_probs(_index_for(aux), aux.values, enc.keys, enc.targets, [k])[k]
    else:
        p = None
    return [{"mode": mode, "lambda": lam, "split": split,
             "ppl": _ppl(mixture_nll(enc.target_logprob, p, lam), len(enc.targets))} for lam in lams]


def top1_agreement(memory: MlpMemory, targets: KnnTargets, keys: np.ndarray, n: int = 10_000) -> float:
    """Fraction of the first ``n`` training examples where the memory's argmax equals its target's argmax."""
    n = min(n, len(targets))
    pred = memory.log_proba(keys[targets.example_index[:n]]).argmax(1)
    hits = 0
    for i in range(n):
        rec = targets.record(i)
        hits += int(rec.tokens[np.argmax(rec.probs)] == pred[i])
    return hits / n if n else float("nan")


def powers_of_two(max_k: int) -> list[int]:
    out, k = [], 1
    while k <= max_k:
        out.append(k)
        k *= 2
    return out


def layer_sweep(
    model: DecoderLM,
    corpus: TokenizedCorpus,
    fractions: Sequence[float],
    k: int,
    alpha: float,
    settings: OptimSettings,
    lam: float = 0.25,
    split: str = "valid",
    mlp_cfg: MlpConfig | None = None,
    work_dir: str | Path | None = None,
    seed: int = 0,
) -> list[dict]:
    """Datastore, targets and memory rebuilt at each input depth; PPL of all three modes.

    Fractions mapping to the same block reuse its results.
    """
    mlp_cfg = mlp_cfg or matched_config(model.cfg)
    ids = corpus.split(split)
    ec = EvalConfig(window_len=model.cfg.n_ctx, stride=model.cfg.n_ctx // 2, lam=lam, k=k)
    cache: dict[int, dict] = {}
    rows = []
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        for f in fractions:
            layer = layer_index(f, model.cfg.n_layer)
            if layer not in cache:
                t0 = time.perf_counter()
                ds = build_datastore(model, corpus, "train", f)
                tpath = Path(tmp) / f"layer{layer}.knnt"
                precompute_targets(ds, model, corpus, k, tpath, resume=False)
                mem, _ = train_memory(read_targets(tpath), ds, mlp_cfg, alpha, settings, seed=seed, log_every=0)
                enc = encode_for_eval(model, ids, layer, ec)
                n = len(enc.targets)
                knn = k_sweep(enc, ds, [k], lam, split)[0]
                p = mem.target_proba(enc.keys, enc.targets)
                cache[layer] = {"ppl_lm": _ppl(mixture_nll(enc.target_logprob, None, 0.0), n),
                                "ppl_knn": knn.ppl,
                                "ppl_mlp": _ppl(mixture_nll(enc.target_logprob, p, lam), n)}
                logger.info("layer %d done in %.1fs", layer, time.perf_counter() - t0)
            rows.append({"layer_fraction": f, "layer": layer, "lambda": lam, "split": split, **cache[layer]})
    return rows


def best_fraction(rows: Sequence[dict], column: str = "ppl_mlp") -> float:
    return min(rows, key=lambda r: r[column])["layer_fraction"]


def emit_scaling_run(
    corpus: TokenizedCorpus,
    shapes: Sequence[tuple[int, int]],
    lm_settings: OptimSettings,
    mem_settings: OptimSettings,
    k: int = 64,
    alpha: float = 0.4,
    lam: float = 0.25,
    layer_fraction: float = 0.7,
    n_heads: int = 4,
    split: str = "valid",
    seed: int = 0,
    work_dir: str | Path | None = None,
) -> list[dict]:
    """One (params, compute, PPL) point per decoder shape for the decoder alone and with the memory.

    ``shapes`` holds ``(n_layer, d_model)`` pairs. Compute counts training
    as ``3 * forward FLOPs * tokens``; ``compute_with_precompute`` adds the
    key-extraction forward pass and the exhaustive self-search
    (``2 * d_model`` FLOPs per query-key pair) to the memory's budget.
    """
    rows = []
    n_ctx = corpus.window_len
    n_train = len(corpus.train) - 1
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        for n_layer, d_model in shapes:
            cfg = LmConfig(n_layer=n_layer, d_model=d_model, n_heads=n_heads, n_ctx=n_ctx,
                           n_vocab=corpus.vocab.size)
            model, _ = train_lm(corpus, cfg, lm_settings, seed=seed, log_every=0)
            ec = EvalConfig(window_len=n_ctx, stride=n_ctx // 2, lam=lam)
            layer = layer_index(layer_fraction, n_layer)
            enc = encode_for_eval(model, corpus.split(split), layer, ec)
            n = len(enc.targets)
            lm_tokens = lm_settings.steps * lm_settings.batch_size * n_ctx
            lm_fwd = flops_per_token(cfg, "transformer", n_ctx)
            lm_compute = 3 * lm_fwd * lm_tokens
            rows.append({"system": "lm", "n_layer": n_layer, "d_model": d_model,
                         "params": model.num_params(), "tokens": lm_tokens, "compute": lm_compute,
                         "compute_with_precompute": lm_compute,
                         "ppl": _ppl(mixture_nll(enc.target_logprob, None, 0.0), n)})

            ds = build_datastore(model, corpus, "train", layer_fraction)
            tpath = Path(tmp) / f"{n_layer}x{d_model}.knnt"
            precompute_targets(ds, model, corpus, k, tpath, resume=False)
            mcfg = matched_config(cfg)
            mem, _ = train_memory(read_targets(tpath), ds, mcfg, alpha, mem_settings, seed=seed, log_every=0)
            p = mem.target_proba(enc.keys, enc.targets)
            mem_tokens = mem_settings.steps * mem_settings.batch_size
            mem_fwd = mlp_breakdown(mcfg.n_layer_mlp, d_model, mcfg.d_ff, mcfg.n_vocab).non_embedding
            mem_compute = lm_compute + 3 * mem_fwd * mem_tokens
            precompute = lm_fwd * n_train + 2 * d_model * n_train * n_train
            rows.append({"system": "mlp", "n_layer": n_layer, "d_model": d_model,
                         "params": model.num_params() + mem.num_params() - mem.head.weight.numel() - mem.head.bias.numel(), "tokens": lm_tokens + mem_tokens,
                         "compute": mem_compute, "compute_with_precompute": mem_compute + precompute,
                         "ppl": _ppl(mixture_nll(enc.target_logprob, p, lam), n)})
            logger.info("scaling %dx%d: lm %.3f mlp %.3f", n_layer, d_model, rows[-2]["ppl"], rows[-1]["ppl"])
    return rows


def distribution_samples(
    mode: str,
    model: DecoderLM,
    aux: MlpMemory | Datastore | None,
    ids: np.ndarray,
    samples: int,
    k: int = 1024,
    batch: int = 512,
) -> Iterator[np.ndarray]:
    """Dense next-token distributions for the first ``samples`` examples of ``ids`` (unmixed)."""
    mode = normalize_mode(mode)
    ids = np.asarray(ids)[: samples + 1]
    layer = None
    if mode == "mlp":
        layer = layer_index(check_memory_provenance(model, aux), model.cfg.n_layer)
    elif mode == "knn":
        check_datastore_provenance(model, aux)
        layer = layer_index(aux.meta.layer_fraction, model.cfg.n_layer)
    ec = EvalConfig(window_len=model.cfg.n_ctx, stride=model.cfg.n_ctx // 2)
    enc = encode_stream(model, ids, layer=layer, window_len=ec.window_len, stride=ec.stride,
                        need_logprobs=False, full_logprobs=mode == "lm")
    n = len(enc.targets)
    if mode == "lm":
        for i in range(n):
            yield np.exp(enc.logprobs[i].astype(np.float64))
    elif mode == "mlp":
        for s in range(0, n, batch):
            yield from np.exp(aux.log_proba(enc.keys[s:s + batch]))
    else:
        index = _index_for(aux)
        for s in range(0, n, batch):
            idx, dist, _ = index.search(enc.keys[s:s + batch], k)
            for r in range(len(idx)):
                yield knn_distribution_from(dist[r], aux.values[idx[r]], model.cfg.n_vocab).to_dense()
