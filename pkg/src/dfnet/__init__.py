"""Dynamic fusion network for multi-domain task-oriented dialogue, on a small
numpy autodiff engine."""

from .config import LossWeights, TrainConfig, parse_ablation
from .corpus import Dialogue, KBTriple, Turn, Vocabulary, build_vocab, load_corpus, make_toy_corpus
from .evalkit import MetricsReport, corpus_bleu, entity_f1, evaluate, export_gates
from .model import DFNet
from .training import load_checkpoint, run_experiment, save_checkpoint, train

__all__ = [
    "DFNet",
    "Dialogue",
    "KBTriple",
    "LossWeights",
    "MetricsReport",
    "TrainConfig",
    "Turn",
    "Vocabulary",
    "build_vocab",
    "corpus_bleu",
    "entity_f1",
    "evaluate",
    "export_gates",
    "load_checkpoint",
    "load_corpus",
    "make_toy_corpus",
    "parse_ablation",
    "run_experiment",
    "save_checkpoint",
    "train",
]
