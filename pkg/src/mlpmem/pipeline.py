"""Stage orchestration over a fixed run-directory layout.

Layout under ``RunConfig.out_dir``::

    corpus/     vocab.txt, vocab.txt.scheme, tokens.bin
    lm/         model.ckpt, losses.csv
    datastore/  train.dstr
    targets/    knn.knnt
    memory/     memory.ckpt, losses.csv
    eval/       ppl.csv
    analysis/   sweep and statistics CSVs

Each stage directory holds a ``.prov.json`` recording the hash of the stage's
own hyperparameters chained with its upstream hashes. A stage whose outputs
exist under a matching hash is skipped, so changing ``alpha`` re-runs only
the memory and evaluation stages.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import file_digest
from .config import RunConfig, stage_hash, validate_config
from .corpus import TokenizedCorpus, make_corpus, read_texts
from .datastore import Datastore, build_datastore, load_datastore
from .decoder_lm import DecoderLM, train_lm
from .errors import MlpMemError
from .inference import PPL_COLUMNS, EvalConfig, evaluate_ppl, write_csv
from .knn import precompute_targets, read_targets
from .mlp_memory import MlpMemory, train_memory
from .synth import generate_corpus

logger = logging.getLogger(__name__)

STAGES = ("corpus", "lm", "datastore", "targets", "memory", "eval")
PROV_FILE = ".prov.json"


class StageError(MlpMemError):
    """A pipeline stage failed; ``stage`` names it and the message is prefixed with it."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def lm(self) -> Path:
        return self.root / "lm" / "model.ckpt"

    @property
    def datastore(self) -> Path:
        return self.root / "datastore" / "train.dstr"

    @property
    def targets(self) -> Path:
        return self.root / "targets" / "knn.knnt"

    @property
    def memory(self) -> Path:
        return self.root / "memory" / "memory.ckpt"

    @property
    def eval_csv(self) -> Path:
        return self.root / "eval" / "ppl.csv"

    @property
    def analysis(self) -> Path:
        return self.root / "analysis"

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage


@dataclass
class PipelineResult:
    paths: RunPaths
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    hashes: dict[str, str] = field(default_factory=dict)
    eval_rows: list[dict] = field(default_factory=list)


def _file_sha(path: str | Path) -> str:
    return file_digest(path).hex()


def read_prov(stage_dir: Path) -> dict | None:
    try:
        return json.loads((stage_dir / PROV_FILE).read_text())
    except (OSError, ValueError):
        return None


def write_prov(stage_dir: Path, record: dict) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    tmp = stage_dir / (PROV_FILE + ".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    os.replace(tmp, stage_dir / PROV_FILE)


def write_losses(path: Path, columns: dict[str, list[float]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", *names])
        for i, vals in enumerate(zip(*columns.values())):
            w.writerow([i, *vals])


def load_corpus(paths: RunPaths, window_len: int) -> TokenizedCorpus:
    return TokenizedCorpus.load(paths.corpus, window_len=window_len)


def build_corpus(cfg: RunConfig) -> TokenizedCorpus:
    """Tokenize the configured text files, or generate the synthetic corpus when none are given."""
    c = cfg.corpus
    text = read_texts(c.paths) if c.paths else generate_corpus(c.synthetic_tokens, seed=c.synthetic_seed)
    return make_corpus(text, c.scheme, c.min_freq, tuple(c.ratios), window_len=cfg.lm.n_ctx)


def eval_rows(model: DecoderLM, memory: MlpMemory | None, ds: Datastore | None, ids: np.ndarray,
              cfg: RunConfig) -> list[dict]:
    """Test-split perplexity for the three modes at the configured lambda and k."""
    rows = []
    for mode, aux in (("lm", None), ("knn", ds), ("mlp", memory)):
        if mode != "lm" and aux is None:
            continue
        ec = EvalConfig(cfg.eval_window, cfg.eval_stride, cfg.lam, mode, cfg.k)
        rows.append(evaluate_ppl(model, aux, ids, ec, cfg.eval_split).row())
    return rows


class _Runner:
    def __init__(self, cfg: RunConfig, force: set[str], on_stage: Callable[[str, str], None] | None) -> None:
        self.cfg = cfg
        self.paths = RunPaths(Path(cfg.out_dir))
        self.force = force
        self.on_stage = on_stage
        self.result = PipelineResult(self.paths)

    def stage(self, name: str, upstream: list[str], outputs: list[Path], body: Callable[[], dict | None]) -> str:
        """Run or skip one stage; returns the token downstream stages chain on.

        The token covers the stage's parameters, its upstream tokens and the
        digests of its output files, so a changed artifact invalidates
        everything below it.
        """
        params = self.cfg.stage_dict(name)
        h = stage_hash(params, upstream)
        sdir = self.paths.stage_dir(name)
        prov = read_prov(sdir)
        if (name not in self.force and prov is not None and prov.get("hash") == h
                and all(p.is_file() for p in outputs)
                and prov.get("outputs") == {p.name: _file_sha(p) for p in outputs}):
            logger.info("%s: up to date, skipping", name)
            self.result.skipped.append(name)
            self._notify(name, "skipped")
        else:
            logger.info("%s: running", name)
            self._notify(name, "running")
            try:
                info = body() or {}
            except Exception as exc:  # surfaced with the stage name; partial outputs stay for resume
                raise StageError(name, exc) from exc
            prov = {"stage": name, "hash": h, "params": params, "upstream": upstream,
                    "outputs": {p.name: _file_sha(p) for p in outputs}, **info}
            write_prov(sdir, prov)
            self.result.ran.append(name)
            self._notify(name, "done")
        token = stage_hash(prov["outputs"], [h])
        self.result.hashes[name] = token
        return token

    def _notify(self, name: str, state: str) -> None:
        if self.on_stage is not None:
            self.on_stage(name, state)


def run_pipeline(cfg: RunConfig, force: set[str] | None = None,
                 on_stage: Callable[[str, str], None] | None = None) -> PipelineResult:
    """corpus, train-lm, build-datastore, precompute-knn, train-memory, eval-ppl in order.

    Raises ``ValueError`` listing every violation if the config is invalid and
    ``StageError`` if a stage fails. Precompute resumes from its partial file.
    """
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    torch.set_num_threads(cfg.threads)
    r = _Runner(cfg, set(force or ()), on_stage)
    p = r.paths
    p.root.mkdir(parents=True, exist_ok=True)
    state: dict = {}

    def corpus_stage():
        corpus = build_corpus(cfg)
        corpus.save(p.corpus)
        state["corpus"] = corpus
        return {"n_vocab": corpus.vocab.size,
                "split_lengths": [len(corpus.train), len(corpus.valid), len(corpus.test)]}

    sources = [_file_sha(x) for x in cfg.corpus.paths]
    h_corpus = r.stage("corpus", sources, [p.corpus / "vocab.txt", p.corpus / "tokens.bin"], corpus_stage)

    def corpus() -> TokenizedCorpus:
        if "corpus" not in state:
            state["corpus"] = load_corpus(p, cfg.lm.n_ctx)
        return state["corpus"]

    def lm_cfg():
        return replace(cfg.lm, n_vocab=corpus().vocab.size)

    def lm_stage():
        model, losses = train_lm(corpus(), lm_cfg(), cfg.lm_optim, seed=cfg.lm_seed, out=p.lm)
        write_losses(p.lm.parent / "losses.csv", {"loss": losses})
        state["lm"] = model
        return {"final_loss": float(np.mean(losses[-20:]))}

    h_lm = r.stage("lm", [h_corpus], [p.lm], lm_stage)

    def model() -> DecoderLM:
        if "lm" not in state:
            state["lm"] = DecoderLM.load(p.lm)
        return state["lm"]

    def ds_stage():
        ds = build_datastore(model(), corpus(), "train", cfg.layer_fraction, cfg.ds_window, cfg.ds_stride)
        ds.save(p.datastore)
        state["ds"] = ds
        return {"count": len(ds), "digest": ds.digest().hex()}

    h_ds = r.stage("datastore", [h_lm], [p.datastore], ds_stage)

    def datastore() -> Datastore:
        if "ds" not in state:
            state["ds"] = load_datastore(p.datastore)
        return state["ds"]

    def targets_stage():
        p.targets.parent.mkdir(parents=True, exist_ok=True)
        precompute_targets(datastore(), model(), corpus(), cfg.k, p.targets, resume=True)
        return {}

    h_tg = r.stage("targets", [h_ds], [p.targets], targets_stage)

    def memory_stage():
        mem, log = train_memory(read_targets(p.targets), datastore(), cfg.mlp_config(corpus().vocab.size),
                                cfg.alpha, cfg.mlp_optim, seed=cfg.mlp_seed, out=p.memory)
        write_losses(p.memory.parent / "losses.csv", {"combined": log.combined, "kl": log.kl, "ce": log.ce})
        state["mem"] = mem
        return {"final_loss": float(np.mean(log.combined[-20:]))}

    h_mem = r.stage("memory", [h_tg], [p.memory], memory_stage)

    def eval_stage():
        mem = state.get("mem") or MlpMemory.load(p.memory)
        rows = eval_rows(model(), mem, datastore(), corpus().split(cfg.eval_split), cfg)
        write_csv(p.eval_csv, rows, PPL_COLUMNS)
        return {}

    r.stage("eval", [h_mem, h_ds], [p.eval_csv], eval_stage)
    p.analysis.mkdir(exist_ok=True)
    with open(p.eval_csv, newline="") as f:
        r.result.eval_rows = list(csv.DictReader(f))
    return r.result
