"""scikit-learn style facade over vocabulary building, pretraining,
segmentation, finetuning and generation."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import segment_texts
from .checkpoint import load_checkpoint, read_kv, save_checkpoint
from .corpus import CharVocab, Document, batchify, build_lexicon
from .decoding import DecodeConfig, DecodeResult, dynamic_decode
from .lattice import batch_log_marginal
from .model import ModelConfig, SegmentalModel
from .training import PROMPT_MARKER, PromptExample, TrainConfig, finetune, pretrain, render_prompt

_PARAMS_FILE = "estimator.txt"


def _validate_texts(X, name: str = "X") -> list[str]:
    """A non-empty sequence of non-blank strings."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    if isinstance(X, np.ndarray):
        X = X.ravel().tolist()
    try:
        texts = list(X)
    except TypeError:
        raise TypeError(f"{name} must be an iterable of strings") from None
    if not texts:
        raise ValueError(f"{name} is empty")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise TypeError(f"{name}[{i}] is {type(t).__name__}, expected str")
    return texts


def _validate_pairs(pairs, name: str) -> list[PromptExample]:
    out = []
    for i, p in enumerate(pairs):
        if isinstance(p, PromptExample):
            out.append(p)
            continue
        try:
            if isinstance(p, str):
                raise TypeError
            context, completion = p
        except (TypeError, ValueError):
            raise TypeError(f"{name}[{i}] must be a (context, completion) pair") from None
        if not isinstance(context, str) or not isinstance(completion, str):
            raise TypeError(f"{name}[{i}] must hold two strings")
        out.append(PromptExample(context, completion))
    if not out:
        raise ValueError(f"{name} is empty")
    return out


class SegmentalLM(TransformerMixin, BaseEstimator):
    """Subword-segmental character language model.

    ``fit`` builds the character vocabulary and subword lexicon from the
    training texts and pretrains on the marginal likelihood. ``transform``
    returns Viterbi segmentations in pipe format, ``score`` the mean
    per-character log-likelihood, and ``predict`` generated completions.
    """

    def __init__(
        self,
        layers: int = 6,
        heads: int = 8,
        embed_dim: int = 512,
        max_seq_len: int = 512,
        lexicon_size: int = 10000,
        max_segment_len: int = 5,
        dropout: float = 0.1,
        learning_rate: float = 5e-4,
        warmup_steps: int = 4000,
        batch_size: int = 256,
        epochs: int = 1,
        seed: int = 0,
        checkpoint_dir: str = "checkpoints",
        beam_size: int = 5,
        max_new_chars: int = 200,
    ):
        self.layers = layers
        self.heads = heads
        self.embed_dim = embed_dim
        self.max_seq_len = max_seq_len
        self.lexicon_size = lexicon_size
        self.max_segment_len = max_segment_len
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.checkpoint_dir = checkpoint_dir
        self.beam_size = beam_size
        self.max_new_chars = max_new_chars

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            warmup_steps=self.warmup_steps,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            checkpoint_dir=str(self.checkpoint_dir),
        )

    def _decode_config(self) -> DecodeConfig:
        return DecodeConfig(beam_size=self.beam_size, max_new_chars=self.max_new_chars)

    def fit(self, X, y=None):
        texts = _validate_texts(X)
        docs = [Document.from_text(t) for t in texts if t.strip()]
        if not docs:
            raise ValueError("X holds only blank texts")
        # the prompt marker is reserved so the model can be finetuned later
        vocab = CharVocab.from_texts([*(d.text for d in docs), PROMPT_MARKER])
        lexicon = build_lexicon(docs, self.lexicon_size, self.max_segment_len)
        config = ModelConfig(
            layers=self.layers,
            heads=self.heads,
            embed_dim=self.embed_dim,
            max_seq_len=self.max_seq_len,
            lexicon_size=len(lexicon),
            max_segment_len=self.max_segment_len,
            dropout=self.dropout,
        )
        torch.manual_seed(self.seed)
        self.model_ = SegmentalModel(config, vocab, lexicon)
        self.checkpoints_ = pretrain(self.model_, docs, self._train_config())
        self.n_chars_seen_ = sum(len(d) for d in docs)
        return self

    def transform(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        return segment_texts(self.model_, _validate_texts(X))

    @torch.no_grad()
    def score(self, X, y=None) -> float:
        """Mean log-likelihood per character (nats); higher is better."""
        check_is_fitted(self, "model_")
        docs = batchify(
            (Document.from_text(t) for t in _validate_texts(X) if t.strip()),
            self.model_.config.max_seq_len,
        )
        total, chars = 0.0, 0
        for i in range(0, len(docs), 32):
            part = docs[i : i + 32]
            total += batch_log_marginal(self.model_, part).sum().item()
            chars += sum(len(d) for d in part)
        return total / chars

    def fine_tune(self, pairs: Iterable, valid_pairs: Iterable | None = None, **overrides):
        """Finetune on (context, completion) pairs; keeps the best epoch."""
        check_is_fitted(self, "model_")
        train = _validate_pairs(pairs, "pairs")
        valid = _validate_pairs(valid_pairs, "valid_pairs") if valid_pairs is not None else None
        overrides.setdefault("seed", self.seed)
        overrides.setdefault("checkpoint_dir", str(Path(self.checkpoint_dir) / "finetune"))
        best = finetune(self.model_, train, TrainConfig.for_finetuning(**overrides), valid)
        self.model_ = load_checkpoint(best)
        self.finetuned_checkpoint_ = best
        return self

    def generate(self, context: str, render: bool = True) -> DecodeResult:
        check_is_fitted(self, "model_")
        prompt = render_prompt(context) if render else context
        return dynamic_decode(self.model_, prompt, self._decode_config())

    def predict(self, X) -> list[str]:
        """Generated completion for each context."""
        return [self.generate(c).text for c in _validate_texts(X)]

    def save(self, path: str | Path) -> Path:
        check_is_fitted(self, "model_")
        path = save_checkpoint(self.model_, path)
        params = self.get_params()
        (path / _PARAMS_FILE).write_text(
            "".join(f"{k}={v}\n" for k, v in params.items()), encoding="utf-8"
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SegmentalLM":
        """Estimator around a checkpoint; parameters come from the saved model
        config, and from the estimator settings when present."""
        path = Path(path)
        model = load_checkpoint(path)
        est = cls()
        defaults = est.get_params()
        saved = read_kv(path / _PARAMS_FILE) if (path / _PARAMS_FILE).is_file() else {}
        params = {k: type(defaults[k])(v) for k, v in saved.items() if k in defaults}
        cfg = model.config
        params.update(
            layers=cfg.layers,
            heads=cfg.heads,
            embed_dim=cfg.embed_dim,
            max_seq_len=cfg.max_seq_len,
            max_segment_len=cfg.max_segment_len,
            dropout=cfg.dropout,
        )
        est.set_params(**params)
        est.model_ = model
        est.checkpoints_ = [path]
        return est
