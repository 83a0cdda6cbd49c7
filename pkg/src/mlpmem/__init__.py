"""Parametric MLP memory distilled from a kNN-LM retriever, at desk scale."""
from __future__ import annotations

__version__ = "0.1.0"

from .analysis import PowerLawFit, distribution_stats, exponent_improvement, fit_power_law
from .config import RunConfig, load_config, validate_config
from .corpus import TokenizedCorpus, Vocabulary, build_vocab, iter_examples, tokenize
from .datastore import Datastore, build_datastore, load_datastore
from .decoder_lm import DecoderLM, LmConfig, train_lm
from .flops import flops_per_token, speed_ratio
from .inference import EvalConfig, evaluate_ppl, predict
from .knn import knn_distribution, knn_search, precompute_targets, read_targets
from .mlp_memory import MlpConfig, MlpMemory, train_memory
from .pipeline import run_pipeline

__all__ = [
    "Datastore", "DecoderLM", "EvalConfig", "LmConfig", "MlpConfig", "MlpMemory", "PowerLawFit",
    "RunConfig", "TokenizedCorpus", "Vocabulary", "build_datastore", "build_vocab", "distribution_stats",
    "evaluate_ppl", "exponent_improvement", "fit_power_law", "flops_per_token", "iter_examples",
    "knn_distribution", "knn_search", "load_config", "load_datastore", "precompute_targets", "predict",
    "read_targets", "run_pipeline", "speed_ratio", "tokenize", "train_lm", "train_memory", "validate_config",
]
