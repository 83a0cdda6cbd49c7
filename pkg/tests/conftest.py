from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from mlpmem.corpus import TokenizedCorpus, make_corpus
from mlpmem.datastore import Datastore, build_datastore
from mlpmem.decoder_lm import DecoderLM, LmConfig, train_lm
from mlpmem.knn import KnnTargets, precompute_targets, read_targets
from mlpmem.mlp_memory import MlpConfig, MlpMemory, train_memory
from mlpmem.optim import OptimSettings
from mlpmem.synth import generate_corpus

torch.set_num_threads(1)


@dataclass
class Tiny:
    corpus: TokenizedCorpus
    model: DecoderLM
    ds: Datastore
    targets_path: Path
    targets: KnnTargets
    memory: MlpMemory
    k: int


@pytest.fixture(scope="session")
def tiny(tmp_path_factory) -> Tiny:
    """A small trained decoder, its datastore, k=8 targets and a memory, shared by many tests."""
    root = tmp_path_factory.mktemp("tiny")
    corpus = make_corpus(generate_corpus(4000, seed=3), window_len=32)
    cfg = LmConfig(n_layer=3, d_model=16, n_heads=2, n_ctx=32, n_vocab=corpus.vocab.size)
    model, _ = train_lm(corpus, cfg, OptimSettings(steps=60, batch_size=16, lr=3e-3, warmup=5), seed=0,
                        log_every=0)
    ds = build_datastore(model, corpus, "train", 0.7)
    tpath = root / "t.knnt"
    precompute_targets(ds, model, corpus, 8, tpath)
    targets = read_targets(tpath)
    mcfg = MlpConfig(n_layer_mlp=2, d_model=16, d_ff=32, n_vocab=corpus.vocab.size)
    mem, _ = train_memory(targets, ds, mcfg, 0.4, OptimSettings(steps=40, batch_size=64, lr=3e-3, warmup=5),
                          seed=0, log_every=0)
    return Tiny(corpus, model, ds, tpath, targets, mem, 8)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


TINY_INI = """\
[corpus]
synthetic_tokens = 3000
synthetic_seed = 5

[lm]
n_layer = 2
d_model = 16
n_heads = 2
n_ctx = 32
steps = 30
batch_size = 8
lr = 3e-3
warmup = 5

[memory]
n_layer = 2
d_ff = 32
alpha = 0.4
steps = 20
batch_size = 64
lr = 3e-3
warmup = 2

[knn]
k = 8
layer_fraction = 0.7

[eval]
lambda = 0.25
window = 32
stride = 16

[run]
out_dir = {out}
"""


@pytest.fixture
def tiny_ini(tmp_path) -> Path:
    """A run config small enough for the whole pipeline to finish in a few seconds."""
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI.format(out=tmp_path / "run"))
    return path


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion, then assert it."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
