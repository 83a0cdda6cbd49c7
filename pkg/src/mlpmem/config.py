"""Run configuration: an INI file with one section per stage.

Environment variables may override paths and the thread count only:
``MLPMEM_RUN_DIR``, ``MLPMEM_CORPUS`` (comma-separated paths) and
``MLPMEM_THREADS``.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .decoder_lm import LmConfig
from .mlp_memory import MlpConfig, matched_config
from .optim import OptimSettings


@dataclass
class CorpusSettings:
    paths: list[str] = field(default_factory=list)
    # used when no paths are given: size of the generated encyclopedia corpus
    synthetic_tokens: int = 150_000
    synthetic_seed: int = 0
    scheme: str = "word"
    min_freq: int = 1
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05)


@dataclass
class RunConfig:
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    lm: LmConfig = field(default_factory=LmConfig)
    lm_optim: OptimSettings = field(default_factory=OptimSettings)
    # memory shape; d_ff None means "match the decoder's parameter count"
    mlp_layers: int | None = None
    mlp_d_ff: int | None = None
    mlp_activation: str = "silu"
    mlp_optim: OptimSettings = field(default_factory=lambda: OptimSettings(batch_size=128))
    k: int = 1024
    alpha: float = 0.4
    lam: float = 0.25
    layer_fraction: float = 0.7
    ds_window: int | None = None
    ds_stride: int | None = None
    eval_window: int = 1024
    eval_stride: int = 512
    eval_split: str = "test"
    lm_seed: int = 0
    mlp_seed: int = 0
    threads: int = 1
    out_dir: str = "runs/default"

    def mlp_config(self, n_vocab: int) -> MlpConfig:
        lm = replace(self.lm, n_vocab=n_vocab)
        if self.mlp_d_ff is None:
            return matched_config(lm, self.mlp_layers, self.mlp_activation)
        return MlpConfig(self.mlp_layers or lm.n_layer, lm.d_model, self.mlp_d_ff, n_vocab, self.mlp_activation)

    def stage_dict(self, stage: str) -> dict:
        """Hyperparameters that determine one stage's output (excluding upstream artifacts)."""
        c = self
        if stage == "corpus":
            return asdict(c.corpus) | {"window": c.lm.n_ctx}
        if stage == "lm":
            return {"lm": asdict(c.lm), "optim": asdict(c.lm_optim), "seed": c.lm_seed}
        if stage == "datastore":
            return {"layer_fraction": c.layer_fraction, "window": c.ds_window, "stride": c.ds_stride}
        if stage == "targets":
            return {"k": c.k}
        if stage == "memory":
            return {"layers": c.mlp_layers, "d_ff": c.mlp_d_ff, "activation": c.mlp_activation,
                    "optim": asdict(c.mlp_optim), "alpha": c.alpha, "seed": c.mlp_seed}
        if stage == "eval":
            return {"lambda": c.lam, "k": c.k, "window": c.eval_window, "stride": c.eval_stride,
                    "split": c.eval_split}
        raise ValueError(f"unknown stage {stage!r}")


def stage_hash(payload: dict, upstream: list[str] | tuple[str, ...] = ()) -> str:
    blob = json.dumps({"params": payload, "upstream": list(upstream)}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _optim(sec: configparser.SectionProxy, base: OptimSettings) -> OptimSettings:
    return OptimSettings(
        steps=sec.getint("steps", base.steps),
        batch_size=sec.getint("batch_size", base.batch_size),
        lr=sec.getfloat("lr", base.lr),
        weight_decay=sec.getfloat("weight_decay", base.weight_decay),
        warmup=sec.getint("warmup", base.warmup),
        grad_clip=sec.getfloat("grad_clip", base.grad_clip),
    )


def _opt_int(sec: configparser.SectionProxy, key: str) -> int | None:
    v = sec.get(key, "").strip()
    return int(v) if v else None


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as f:
        cp.read_file(f)
    for s in ("corpus", "lm", "memory", "knn", "eval", "run"):
        if not cp.has_section(s):
            cp.add_section(s)
    c = RunConfig()
    cs = cp["corpus"]
    paths = [p.strip() for p in cs.get("paths", "").split(",") if p.strip()]
    base = Path(path).resolve().parent
    c.corpus = CorpusSettings(
        paths=[str((base / p).resolve()) if not Path(p).is_absolute() else p for p in paths],
        synthetic_tokens=cs.getint("synthetic_tokens", 150_000),
        synthetic_seed=cs.getint("synthetic_seed", 0),
        scheme=cs.get("scheme", "word"),
        min_freq=cs.getint("min_freq", 1),
        ratios=tuple(float(x) for x in cs.get("ratios", "0.9,0.05,0.05").split(",")),
    )
    ls = cp["lm"]
    c.lm = LmConfig(
        n_layer=ls.getint("n_layer", 4), d_model=ls.getint("d_model", 64), n_heads=ls.getint("n_heads", 4),
        n_ctx=ls.getint("n_ctx", 128), n_vocab=ls.getint("n_vocab", 1),
        d_attn=_opt_int(ls, "d_attn"), d_ff=_opt_int(ls, "d_ff"),
    )
    c.lm_optim = _optim(ls, OptimSettings())
    c.lm_seed = ls.getint("seed", 0)
    ms = cp["memory"]
    c.mlp_layers = _opt_int(ms, "n_layer")
    c.mlp_d_ff = _opt_int(ms, "d_ff")
    c.mlp_activation = ms.get("activation", "silu")
    c.mlp_optim = _optim(ms, OptimSettings(batch_size=128))
    c.mlp_seed = ms.getint("seed", 0)
    c.alpha = ms.getfloat("alpha", 0.4)
    ks = cp["knn"]
    c.k = ks.getint("k", 1024)
    c.layer_fraction = ks.getfloat("layer_fraction", 0.7)
    c.ds_window = _opt_int(ks, "window")
    c.ds_stride = _opt_int(ks, "stride")
    es = cp["eval"]
    c.lam = es.getfloat("lambda", 0.25)
    c.eval_window = es.getint("window", 1024)
    c.eval_stride = es.getint("stride", 512)
    c.eval_split = es.get("split", "test")
    rs = cp["run"]
    c.threads = rs.getint("threads", 1)
    out = rs.get("out_dir", "runs/default")
    # corpus paths resolve against the config file, the run directory against the working directory
    c.out_dir = out
    # environment overrides: paths and threads only
    if env.get("MLPMEM_RUN_DIR"):
        c.out_dir = env["MLPMEM_RUN_DIR"]
    if env.get("MLPMEM_CORPUS"):
        c.corpus.paths = [p for p in env["MLPMEM_CORPUS"].split(",") if p]
    if env.get("MLPMEM_THREADS"):
        c.threads = int(env["MLPMEM_THREADS"])
    return c


def validate_config(c: RunConfig) -> list[str]:
    """Every violation found; an empty list means the config is usable."""
    v: list[str] = []
    if not 0.0 <= c.lam <= 1.0:
        v.append(f"lambda out of range [0, 1]: {c.lam}")
    if not 0.0 <= c.alpha <= 1.0:
        v.append(f"alpha out of range [0, 1]: {c.alpha}")
    if not 0.0 < c.layer_fraction <= 1.0:
        v.append(f"layer_fraction out of range (0, 1]: {c.layer_fraction}")
    if c.k < 1:
        v.append(f"k must be >= 1: {c.k}")
    for p in c.corpus.paths:
        if not Path(p).exists():
            v.append(f"corpus path does not exist: {p}")
    if not c.corpus.paths and c.corpus.synthetic_tokens < 100:
        v.append("no corpus paths and synthetic_tokens < 100")
    if c.corpus.scheme not in ("word", "char"):
        v.append(f"unknown tokenization scheme: {c.corpus.scheme}")
    r = c.corpus.ratios
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        v.append(f"split ratios must be three non-negative numbers summing to 1: {r}")
    if c.lm.d_attn % c.lm.n_heads:
        v.append("d_attn must be divisible by n_heads")
    if c.lm.n_ctx < 2:
        v.append("n_ctx must be >= 2")
    if c.mlp_activation not in ("silu", "gelu", "relu"):
        v.append(f"unknown memory activation: {c.mlp_activation}")
    if (c.mlp_layers is not None and c.mlp_layers < 1) or (c.mlp_d_ff is not None and c.mlp_d_ff < 1):
        v.append("memory n_layer and d_ff must be positive")
    if c.eval_stride < 1 or c.eval_stride > c.eval_window:
        v.append("eval stride must be in [1, window]")
    if c.eval_split not in ("train", "valid", "test"):
        v.append(f"unknown eval split: {c.eval_split}")
    if c.threads < 1:
        v.append("threads must be >= 1")
    for name, o in (("lm", c.lm_optim), ("memory", c.mlp_optim)):
        if o.steps < 1 or o.batch_size < 1 or o.lr <= 0:
            v.append(f"{name} optimizer settings must be positive")
    return v
