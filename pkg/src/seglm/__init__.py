"""Subword-segmental language modelling on a character-level Transformer,
with tools for tracking how learned segmentations evolve during training."""

from .analysis import (
    SegmentedCorpus,
    build_trajectory,
    fertility,
    idiosyncrasy,
    morph_boundary_prf,
    productivity,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CharVocab, Document, SubwordLexicon, build_lexicon, load_corpus
from .decoding import DecodeConfig, detect_degeneration, dynamic_decode
from .estimator import SegmentalLM
from .lattice import conditional_log_likelihood, forward_marginal, viterbi
from .metrics import bleu, chrf, evaluate
from .model import ModelConfig, SegmentalModel
from .training import TrainConfig, finetune, make_schedule, pretrain

__all__ = [
    "CharVocab",
    "DecodeConfig",
    "Document",
    "ModelConfig",
    "SegmentalLM",
    "SegmentalModel",
    "SegmentedCorpus",
    "SubwordLexicon",
    "TrainConfig",
    "bleu",
    "build_lexicon",
    "build_trajectory",
    "chrf",
    "conditional_log_likelihood",
    "detect_degeneration",
    "dynamic_decode",
    "evaluate",
    "fertility",
    "finetune",
    "forward_marginal",
    "idiosyncrasy",
    "load_checkpoint",
    "load_corpus",
    "make_schedule",
    "morph_boundary_prf",
    "pretrain",
    "productivity",
    "save_checkpoint",
    "viterbi",
]
