"""``mlpmem`` command line.

Every subcommand exits 0 on success. Failures print ``error [<stage>]: ...``
to stderr and exit 1; argument errors exit 2.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .analysis import (
    DEFAULT_MASS_LEVELS,
    DEFAULT_THRESHOLDS,
    SCALING_FIT_COLUMNS,
    distribution_stats,
    fit_scaling_table,
)
from .config import RunConfig, load_config, validate_config
from .corpus import TokenizedCorpus, make_corpus, read_texts
from .datastore import build_datastore, load_datastore
from .decoder_lm import DecoderLM, extract_keys, train_lm
from .experiments import (
    ALPHA_COLUMNS,
    K_COLUMNS,
    LAMBDA_COLUMNS,
    LAYER_COLUMNS,
    alpha_sweep,
    distribution_samples,
    k_sweep_rows,
    lambda_sweep_rows,
    layer_sweep,
    powers_of_two,
)
from .inference import (
    LATENCY_COLUMNS,
    MODES,
    PPL_COLUMNS,
    EvalConfig,
    bench_latency,
    evaluate_ppl,
    normalize_mode,
    write_csv,
)
from .knn import BruteForceIndex, precompute_targets, read_targets
from .mlp_memory import MlpMemory, train_memory
from .pipeline import StageError, run_pipeline, write_losses
from .synth import generate_corpus

logger = logging.getLogger("mlpmem")


class CliError(Exception):
    def __init__(self, stage: str, message: str) -> None:
        super().__init__(message)
        self.stage = stage


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _config(path: str | None) -> RunConfig:
    cfg = load_config(path) if path else RunConfig()
    problems = validate_config(cfg)
    if problems:
        raise CliError("config", "; ".join(problems))
    torch.set_num_threads(cfg.threads)
    return cfg


def _corpus(path: str, cfg: RunConfig) -> TokenizedCorpus:
    return TokenizedCorpus.load(path, window_len=cfg.lm.n_ctx)


def _emit(rows: list[dict], columns: Sequence[str], out: str | None) -> None:
    if out:
        write_csv(out, rows, columns)
        logger.info("wrote %s", out)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(a: argparse.Namespace) -> None:
    if a.inputs:
        text = read_texts(a.inputs)
    else:
        text = generate_corpus(a.synthetic, seed=a.seed)
    corpus = make_corpus(text, a.scheme, a.min_freq, tuple(_floats(a.ratios)), window_len=a.window)
    corpus.save(a.out)
    print(f"vocab {corpus.vocab.size} train {len(corpus.train)} valid {len(corpus.valid)} test {len(corpus.test)}")


def cmd_train_lm(a: argparse.Namespace) -> None:
    cfg = _config(a.config)
    corpus = _corpus(a.corpus, cfg)
    lm = replace(cfg.lm, n_vocab=corpus.vocab.size)
    seed = cfg.lm_seed if a.seed is None else a.seed
    settings = cfg.lm_optim if a.steps is None else replace(cfg.lm_optim, steps=a.steps)
    _, losses = train_lm(corpus, lm, settings, seed=seed, out=a.out)
    write_losses(Path(a.out).with_suffix(".losses.csv"), {"loss": losses})
    print(f"loss {losses[0]:.4f} -> {np.mean(losses[-20:]):.4f}; saved {a.out}")


def cmd_build_datastore(a: argparse.Namespace) -> None:
    model = DecoderLM.load(a.model)
    corpus = TokenizedCorpus.load(a.corpus, window_len=model.cfg.n_ctx)
    ds = build_datastore(model, corpus, a.split, a.layer_frac, a.window, a.stride)
    ds.save(a.out)
    print(f"{len(ds)} entries, d_model {ds.d_model}; saved {a.out}")


def cmd_precompute_knn(a: argparse.Namespace) -> None:
    ds = load_datastore(a.datastore)
    model = DecoderLM.load(a.model)
    corpus = TokenizedCorpus.load(a.corpus, window_len=model.cfg.n_ctx)
    precompute_targets(ds, model, corpus, a.k, a.out, split=ds.meta.split, resume=not a.restart)
    print(f"targets for {len(ds)} examples; saved {a.out}")


def cmd_train_memory(a: argparse.Namespace) -> None:
    cfg = _config(a.config)
    targets = read_targets(a.targets)
    ds = load_datastore(a.datastore)
    keys = None
    if a.keys == "recompute":
        if not (a.model and a.corpus):
            raise CliError("train-memory", "--keys recompute needs --model and --corpus")
        model = DecoderLM.load(a.model)
        corpus = TokenizedCorpus.load(a.corpus, window_len=model.cfg.n_ctx)
        keys, _ = extract_keys(model, corpus, ds.meta.split, ds.meta.layer_fraction)
    alpha = cfg.alpha if a.alpha is None else a.alpha
    seed = cfg.mlp_seed if a.seed is None else a.seed
    settings = cfg.mlp_optim if a.steps is None else replace(cfg.mlp_optim, steps=a.steps)
    mem, log = train_memory(targets, ds, cfg.mlp_config(targets.meta.vocab_size), alpha, settings,
                            seed=seed, keys=keys, out=a.out)
    write_losses(Path(a.out).with_suffix(".losses.csv"), {"combined": log.combined, "kl": log.kl, "ce": log.ce})
    print(f"loss {log.combined[0]:.4f} -> {np.mean(log.combined[-20:]):.4f}; saved {a.out}")


def cmd_eval_ppl(a: argparse.Namespace) -> None:
    model = DecoderLM.load(a.model)
    corpus = TokenizedCorpus.load(a.corpus, window_len=model.cfg.n_ctx)
    rows = []
    for mode in a.mode:
        aux = None
        if mode == "mlp":
            if not a.memory:
                raise CliError("eval-ppl", "mode mlp needs --memory")
            aux = MlpMemory.load(a.memory)
        elif mode == "knn":
            if not a.datastore:
                raise CliError("eval-ppl", "mode knn needs --datastore")
            aux = load_datastore(a.datastore)
        ec = EvalConfig(a.window, a.stride, a.lam, mode, a.k)
        rows.append(evaluate_ppl(model, aux, corpus.split(a.split), ec, a.split).row())
    _emit(rows, PPL_COLUMNS, a.out)


def cmd_bench_latency(a: argparse.Namespace) -> None:
    model = DecoderLM.load(a.model)
    modes = list(MODES) if a.modes == "all" else [normalize_mode(m) for m in a.modes.split(",")]
    memory = MlpMemory.load(a.memory) if a.memory else None
    if "mlp" in modes and memory is None:
        raise CliError("bench-latency", "mode mlp needs --memory")
    stores = []
    if a.datastore:
        stores.append(load_datastore(a.datastore))
    rng = np.random.default_rng(a.seed)
    for n in _ints(a.sizes or ""):
        stores.append(BruteForceIndex(rng.standard_normal((n, model.cfg.d_model)).astype(np.float32)))
    if "knn" in modes and not stores:
        raise CliError("bench-latency", "mode knn needs --datastore or --sizes")
    rows = bench_latency(model, memory, stores, modes, _ints(a.ctx), a.reps, a.warmup, a.k, seed=a.seed)
    _emit([r.row() for r in rows], LATENCY_COLUMNS + ["ms_median", "aux_ms_median", "aux_ms_mean", "aux_stdev"],
          a.out)


def cmd_fit_scaling(a: argparse.Namespace) -> None:
    with open(a.csv, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise CliError("fit-scaling", f"{a.csv} has no rows")
    axes = [x for x in a.axes.split(",") if x in rows[0]]
    if not axes:
        raise CliError("fit-scaling", f"none of the axes {a.axes} are columns of {a.csv}")
    _emit(fit_scaling_table(rows, axes), SCALING_FIT_COLUMNS, a.out)


def cmd_stats(a: argparse.Namespace) -> None:
    model = DecoderLM.load(a.model)
    corpus = TokenizedCorpus.load(a.corpus, window_len=model.cfg.n_ctx)
    mode = normalize_mode(a.mode)
    aux = None
    if mode == "mlp":
        aux = MlpMemory.load(a.memory) if a.memory else None
    elif mode == "knn":
        aux = load_datastore(a.datastore) if a.datastore else None
    if mode != "lm" and aux is None:
        raise CliError("stats", f"mode {mode} needs --{'memory' if mode == 'mlp' else 'datastore'}")
    stats = distribution_stats(distribution_samples(mode, model, aux, corpus.split(a.split), a.samples, a.k),
                               DEFAULT_THRESHOLDS, DEFAULT_MASS_LEVELS)
    nz, cum = stats.rows(mode)
    out = Path(a.out) if a.out else None
    if out:
        write_csv(out.with_name(out.stem + "_nonzero.csv"), [nz], list(nz))
        write_csv(out.with_name(out.stem + "_mass.csv"), [cum], list(cum))
        logger.info("wrote %s_{nonzero,mass}.csv", out.with_name(out.stem))
    else:
        _emit([nz], list(nz), None)
        _emit([cum], list(cum), None)


def cmd_run_all(a: argparse.Namespace) -> None:
    cfg = _config(a.config)
    if a.out_dir:
        cfg.out_dir = a.out_dir
    res = run_pipeline(cfg, force=set(a.force or ()),
                       on_stage=lambda s, st: print(f"[{s}] {st}", flush=True))
    for r in res.eval_rows:
        print(f"{r['mode']:>4}  lambda {r['lambda']:<5} k {r['k']:<5} {r['split']} ppl {float(r['ppl']):.4f}")
    print(f"run directory: {res.paths.root}")


def cmd_sweep(a: argparse.Namespace) -> None:
    cfg = _config(a.config)
    root = Path(a.out_dir or cfg.out_dir)
    model = DecoderLM.load(root / "lm" / "model.ckpt")
    corpus = TokenizedCorpus.load(root / "corpus", window_len=model.cfg.n_ctx)
    ds = load_datastore(root / "datastore" / "train.dstr")
    out = a.out or str(root / "analysis" / f"{a.kind}_sweep.csv")
    if a.kind == "alpha":
        rows = alpha_sweep(model, ds, root / "targets" / "knn.knnt", corpus.split(a.split),
                           cfg.mlp_config(corpus.vocab.size), _floats(a.values or "0,0.2,0.4,0.6,0.8,1"),
                           cfg.mlp_optim, cfg.lam, split=a.split, seed=cfg.mlp_seed)
        _emit(rows, ALPHA_COLUMNS, out)
    elif a.kind == "lambda":
        lams = _floats(a.values or "0.1,0.2,0.3,0.4,0.5")
        rows = []
        for mode, aux in (("knn", ds), ("mlp", MlpMemory.load(root / "memory" / "memory.ckpt"))):
            rows += lambda_sweep_rows(model, aux, corpus.split(a.split), mode, lams, cfg.k, a.split)
        _emit(rows, LAMBDA_COLUMNS, out)
    elif a.kind == "k":
        ks = _ints(a.values) if a.values else powers_of_two(cfg.k)
        _emit(k_sweep_rows(model, ds, corpus.split(a.split), ks, cfg.lam, split=a.split), K_COLUMNS, out)
    else:
        fracs = _floats(a.values or "0.2,0.4,0.6,0.8,1.0")
        rows = layer_sweep(model, corpus, fracs, cfg.k, cfg.alpha, cfg.mlp_optim, cfg.lam, a.split,
                           cfg.mlp_config(corpus.vocab.size), work_dir=root / "analysis", seed=cfg.mlp_seed)
        _emit(rows, LAYER_COLUMNS, out)


def cmd_check_config(a: argparse.Namespace) -> None:
    problems = validate_config(load_config(a.config))
    if problems:
        raise CliError("config", "; ".join(problems))
    print("ok")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlpmem", description="Train and evaluate an MLP memory distilled from kNN-LM.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("ingest", help="tokenize text into a corpus directory")
    s.add_argument("inputs", nargs="*", help="UTF-8 text files, concatenated in order")
    s.add_argument("--out", required=True, help="corpus directory to write")
    s.add_argument("--synthetic", type=int, default=150_000,
                   help="tokens of generated encyclopedia text when no inputs are given (default 150000)")
    s.add_argument("--seed", type=int, default=0, help="seed for the generated corpus")
    s.add_argument("--scheme", choices=("word", "char"), default="word", help="tokenization (default word)")
    s.add_argument("--min-freq", type=int, default=1, help="rarer tokens map to <unk> (default 1)")
    s.add_argument("--ratios", default="0.9,0.05,0.05", help="train,valid,test fractions")
    s.add_argument("--window", type=int, default=128, help="context window n_ctx (default 128)")
    s.set_defaults(func=cmd_ingest, stage="ingest")

    s = sub.add_parser("train-lm", help="train the decoder")
    s.add_argument("--config", help="INI run config (defaults if omitted)")
    s.add_argument("--corpus", required=True, help="corpus directory")
    s.add_argument("--seed", type=int, help="overrides [lm] seed")
    s.add_argument("--steps", type=int, help="overrides [lm] steps")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train_lm, stage="train-lm")

    s = sub.add_parser("build-datastore", help="extract (key, next token) pairs for a split")
    s.add_argument("--model", required=True, help="decoder checkpoint")
    s.add_argument("--corpus", required=True, help="corpus directory")
    s.add_argument("--split", default="train", choices=("train", "valid", "test"), help="split to index")
    s.add_argument("--layer-frac", type=float, default=0.7, help="relative block depth of the keys (default 0.7)")
    s.add_argument("--window", type=int, help="key extraction window (default n_ctx)")
    s.add_argument("--stride", type=int, help="key extraction stride (default window/2)")
    s.add_argument("--out", required=True, help="datastore file")
    s.set_defaults(func=cmd_build_datastore, stage="build-datastore")

    s = sub.add_parser("precompute-knn", help="self-excluded kNN targets for every datastore entry")
    s.add_argument("--datastore", required=True, help="datastore file")
    s.add_argument("--model", required=True, help="decoder checkpoint the datastore was built with")
    s.add_argument("--corpus", required=True, help="corpus directory")
    s.add_argument("--k", type=int, default=1024, help="neighbours retrieved, including the excluded self (default 1024)")
    s.add_argument("--out", required=True, help="target file; an existing partial file is resumed")
    s.add_argument("--restart", action="store_true", help="ignore a partial target file")
    s.set_defaults(func=cmd_precompute_knn, stage="precompute-knn")

    s = sub.add_parser("train-memory", help="fit the MLP memory on KL + CE")
    s.add_argument("--targets", required=True, help="target file")
    s.add_argument("--datastore", required=True, help="datastore the targets were computed on")
    s.add_argument("--keys", choices=("datastore", "recompute"), default="datastore",
                   help="use stored keys or re-encode the split (needs --model and --corpus)")
    s.add_argument("--model", help="decoder checkpoint (for --keys recompute)")
    s.add_argument("--corpus", help="corpus directory (for --keys recompute)")
    s.add_argument("--alpha", type=float, help="KL weight; overrides [memory] alpha")
    s.add_argument("--config", help="INI run config")
    s.add_argument("--seed", type=int, help="overrides [memory] seed")
    s.add_argument("--steps", type=int, help="overrides [memory] steps")
    s.add_argument("--out", required=True, help="memory checkpoint path")
    s.set_defaults(func=cmd_train_memory, stage="train-memory")

    s = sub.add_parser("eval-ppl", help="sliding-window perplexity")
    s.add_argument("--model", required=True, help="decoder checkpoint")
    s.add_argument("--corpus", required=True, help="corpus directory")
    s.add_argument("--memory", help="memory checkpoint (mode mlp)")
    s.add_argument("--datastore", help="datastore (mode knn)")
    s.add_argument("--mode", nargs="+", type=normalize_mode, default=["lm"], help="one or more of lm knn mlp")
    s.add_argument("--lambda", dest="lam", type=float, default=0.25, help="auxiliary weight (default 0.25)")
    s.add_argument("--k", type=int, default=1024, help="neighbours for mode knn (default 1024)")
    s.add_argument("--window", type=int, default=1024, help="window length, capped at n_ctx (default 1024)")
    s.add_argument("--stride", type=int, default=512, help="scored suffix per window (default 512)")
    s.add_argument("--split", default="test", choices=("train", "valid", "test"), help="split to score")
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.set_defaults(func=cmd_eval_ppl, stage="eval-ppl")

    s = sub.add_parser("bench-latency", help="single-threaded per-token latency")
    s.add_argument("--model", required=True, help="decoder checkpoint")
    s.add_argument("--memory", help="memory checkpoint (mode mlp)")
    s.add_argument("--datastore", help="real datastore to scan")
    s.add_argument("--sizes", help="extra random datastores of these sizes, e.g. 10000,100000")
    s.add_argument("--modes", default="all", help="comma list of lm,knn,mlp or 'all'")
    s.add_argument("--ctx", default="128,512,1024", help="context lengths (longer than n_ctx are skipped)")
    s.add_argument("--k", type=int, default=1024, help="neighbours per search (default 1024)")
    s.add_argument("--reps", type=int, default=50, help="timed repetitions per row (default 50)")
    s.add_argument("--warmup", type=int, default=10, help="untimed repetitions first (default 10)")
    s.add_argument("--seed", type=int, default=0, help="seed for random contexts and datastores")
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.set_defaults(func=cmd_bench_latency, stage="bench-latency")

    s = sub.add_parser("fit-scaling", help="power-law fits of PPL against size or compute")
    s.add_argument("--csv", required=True, help="CSV with columns system, ppl and the axes")
    s.add_argument("--axes", default="params,compute,compute_with_precompute",
                   help="comma list of x-axis columns to fit against")
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.set_defaults(func=cmd_fit_scaling, stage="fit-scaling")

    s = sub.add_parser("stats", help="sparsity statistics of a mode's output distributions")
    s.add_argument("--mode", required=True, choices=("lm", "knn", "mlp", "lm-only", "knn-lm", "mlp-mem"),
                   help="whose distributions to measure (uninterpolated)")
    s.add_argument("--model", required=True, help="decoder checkpoint")
    s.add_argument("--corpus", required=True, help="corpus directory")
    s.add_argument("--memory", help="memory checkpoint (mode mlp)")
    s.add_argument("--datastore", help="datastore (mode knn)")
    s.add_argument("--samples", type=int, default=20000, help="positions to sample (default 20000)")
    s.add_argument("--k", type=int, default=1024, help="neighbours for mode knn (default 1024)")
    s.add_argument("--split", default="valid", choices=("train", "valid", "test"), help="split to sample")
    s.add_argument("--out", help="CSV stem; writes <stem>_nonzero.csv and <stem>_mass.csv")
    s.set_defaults(func=cmd_stats, stage="stats")

    s = sub.add_parser("run-all", help="full pipeline into a run directory, skipping up-to-date stages")
    s.add_argument("--config", help="INI run config (defaults if omitted)")
    s.add_argument("--out-dir", help="overrides [run] out_dir")
    s.add_argument("--force", nargs="*", choices=("corpus", "lm", "datastore", "targets", "memory", "eval"),
                   help="re-run these stages even if up to date")
    s.set_defaults(func=cmd_run_all, stage="run-all")

    s = sub.add_parser("sweep", help="alpha, lambda, k or layer sweep over a finished run")
    s.add_argument("kind", choices=("alpha", "lambda", "k", "layer"), help="which hyperparameter to vary")
    s.add_argument("--config", help="INI run config")
    s.add_argument("--out-dir", help="run directory (default from config)")
    s.add_argument("--values", help="comma list of alphas, lambdas, ks or layer fractions")
    s.add_argument("--split", default="valid", choices=("train", "valid", "test"), help="split to score")
    s.add_argument("--out", help="CSV path (default <run>/analysis/<kind>_sweep.csv)")
    s.set_defaults(func=cmd_sweep, stage="sweep")

    s = sub.add_parser("check-config", help="validate a run config and list every violation")
    s.add_argument("config")
    s.set_defaults(func=cmd_check_config, stage="config")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except StageError as e:
        print(f"error [{args.stage}:{e.stage}]: {e.cause}", file=sys.stderr)
        return 1
    except CliError as e:
        print(f"error [{e.stage}]: {e}", file=sys.stderr)
        return 1
    except (Exception, KeyboardInterrupt) as e:
        print(f"error [{args.stage}]: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
