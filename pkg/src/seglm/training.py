"""Pretraining on the marginal likelihood and prompt-completion finetuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .corpus import END_OF_TEXT, CorpusError, Document, batchify
from .lattice import batch_conditional, batch_log_marginal
from .model import SegmentalModel

logger = logging.getLogger(__name__)

PROMPT_MARKER = " # # ="


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: Path | None):
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}"
        )
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    warmup_steps: int = 4000
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    grad_clip: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @classmethod
    def for_finetuning(cls, **overrides) -> "TrainConfig":
        base = dict(learning_rate=1e-4, warmup_steps=500, batch_size=16, epochs=20)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def inverse_sqrt(warmup_steps: int):
    """LR multiplier: linear warmup to 1, then decay as sqrt(warmup / step)."""
    warm = max(warmup_steps, 1)

    def factor(step: int) -> float:
        step = max(step, 1)
        return min(step / warm, math.sqrt(warm / step))

    return factor


def make_schedule(total_steps: int, steps_per_epoch: int) -> list[int]:
    """Checkpoint steps: end of epoch 1, the final step, and the seven
    interior eighths of training."""
    if steps_per_epoch < 1 or total_steps < 1:
        raise ValueError("step counts must be >= 1")
    if total_steps < steps_per_epoch:
        raise ValueError("total_steps must be >= steps_per_epoch")
    eighths = {math.floor(i * total_steps / 8 + 0.5) for i in range(1, 8)}
    steps = {steps_per_epoch, total_steps} | eighths
    return sorted(s for s in steps if s >= 1)


def _optimizer(model, config: TrainConfig):
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, inverse_sqrt(config.warmup_steps))
    return opt, sched


class _CsvLog:
    def __init__(self, path: Path, header: Sequence[str]):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh)
        self._w.writerow(header)

    def row(self, *values):
        self._w.writerow(values)
        self._fh.flush()

    def close(self):
        self._fh.close()


def _check_vocab(model: SegmentalModel, docs: Sequence[Document]):
    unknown = set()
    for d in docs:
        unknown.update(c for c in d.text if c not in model.vocab)
    if unknown:
        raise CorpusError(
            f"corpus has {len(unknown)} character(s) missing from the model vocabulary, "
            f"e.g. {sorted(unknown)[:5]!r}"
        )


def _step(model, opt, sched, loss, config: TrainConfig) -> float:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    lr = opt.param_groups[0]["lr"]
    opt.step()
    sched.step()
    return lr


def pretrain(
    model: SegmentalModel, corpus: Sequence[Document], config: TrainConfig
) -> list[Path]:
    """Minimise the per-character negative log marginal likelihood.

    Documents are chunked to ``model.config.max_seq_len``. Checkpoints are
    written on the ``make_schedule`` steps under ``config.checkpoint_dir``,
    along with ``train_log.csv`` (step, epoch, loss, lr).
    """
    _check_vocab(model, corpus)
    seqs = batchify(corpus, model.config.max_seq_len)
    if not seqs:
        raise CorpusError("no training sequences")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(config.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    per_epoch = math.ceil(len(seqs) / config.batch_size)
    total = per_epoch * config.epochs
    schedule = set(make_schedule(total, per_epoch))
    opt, sched = _optimizer(model, config)
    log = _CsvLog(out_dir / "train_log.csv", ["step", "epoch", "loss", "lr"])
    paths: list[Path] = []
    step = 0
    model.train()
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(seqs))
            for b in range(per_epoch):
                docs = [seqs[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
                n_chars = sum(len(d) for d in docs)
                loss = -batch_log_marginal(model, docs).sum() / n_chars
                step += 1
                if not torch.isfinite(loss):
                    raise TrainingDiverged(step, paths[-1] if paths else None)
                lr = _step(model, opt, sched, loss, config)
                log.row(step, epoch, f"{loss.item():.6f}", f"{lr:.6g}")
                if step in schedule:
                    path = out_dir / f"step_{step:08d}"
                    save_checkpoint(model, path, {"step": step, "epoch": epoch, "loss": loss.item()})
                    paths.append(path)
                    logger.info("step %d epoch %d loss %.4f -> %s", step, epoch, loss.item(), path)
    finally:
        log.close()
        model.eval()
    return paths


# finetuning -----------------------------------------------------------------


@dataclass(frozen=True)
class PromptExample:
    context: str
    completion: str

    @property
    def rendered(self) -> str:
        return render_prompt(self.context) + self.completion

    @property
    def context_len(self) -> int:
        return len(render_prompt(self.context))


def render_prompt(context: str) -> str:
    """``{context} # # =``; the completion follows ``=`` with no space."""
    return context + PROMPT_MARKER


def prompt_document(example: PromptExample) -> Document:
    """The rendered example as a training document ending in end-of-text.

    A word break is forced right after ``=`` so that no segment spans the
    context/completion junction.
    """
    c = example.context_len
    return Document.from_text(example.rendered + END_OF_TEXT, boundaries=[c])


def prepare_prompts(
    examples: Sequence[PromptExample], max_seq_len: int
) -> tuple[list[tuple[Document, int]], dict[str, int]]:
    """Finetuning documents with their context lengths, and skip counts."""
    kept, skipped = [], {"empty_completion": 0, "too_long": 0}
    for ex in examples:
        if not ex.completion:
            skipped["empty_completion"] += 1
            continue
        doc = prompt_document(ex)
        if len(doc) > max_seq_len:
            skipped["too_long"] += 1
            continue
        kept.append((doc, ex.context_len))
    return kept, skipped


def completion_loss(model, items: Sequence[tuple[Document, int]]) -> torch.Tensor:
    """Mean negative log p(O | C) per completion character (end-of-text included)."""
    docs = [d for d, _ in items]
    ctx = [c for _, c in items]
    n_chars = sum(len(d) - c for d, c in items)
    return -batch_conditional(model, docs, ctx).sum() / n_chars


@torch.no_grad()
def evaluate_completion_loss(model, items, batch_size: int = 32) -> float:
    was_training = model.training
    model.eval()
    total, chars = 0.0, 0
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        docs = [d for d, _ in chunk]
        ctx = [c for _, c in chunk]
        total -= batch_conditional(model, docs, ctx).sum().item()
        chars += sum(len(d) - c for d, c in chunk)
    model.train(was_training)
    return total / chars


def finetune(
    model: SegmentalModel,
    examples: Sequence[PromptExample],
    config: TrainConfig,
    valid_examples: Sequence[PromptExample] | None = None,
) -> Path:
    """Maximise log p(O | C); returns the checkpoint with the best validation loss.

    Without ``valid_examples`` the training examples double as validation.
    Writes ``finetune_log.csv`` (step, epoch, loss, lr) and
    ``finetune_valid.csv`` (epoch, valid_loss) under ``config.checkpoint_dir``.
    """
    limit = model.config.max_seq_len
    train, skipped = prepare_prompts(examples, limit)
    if any(skipped.values()):
        logger.warning("finetune: skipped %s", skipped)
    if not train:
        raise CorpusError("no usable finetuning examples")
    _check_vocab(model, [d for d, _ in train])
    valid = prepare_prompts(valid_examples, limit)[0] if valid_examples else train
    if not valid:
        raise CorpusError("no usable validation examples")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(config.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_epoch = math.ceil(len(train) / config.batch_size)
    opt, sched = _optimizer(model, config)
    log = _CsvLog(out_dir / "finetune_log.csv", ["step", "epoch", "loss", "lr"])
    vlog = _CsvLog(out_dir / "finetune_valid.csv", ["epoch", "valid_loss"])
    best_path, best_loss = None, math.inf
    step = 0
    model.train()
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train))
            for b in range(per_epoch):
                items = [train[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
                loss = completion_loss(model, items)
                step += 1
                if not torch.isfinite(loss):
                    raise TrainingDiverged(step, best_path)
                lr = _step(model, opt, sched, loss, config)
                log.row(step, epoch, f"{loss.item():.6f}", f"{lr:.6g}")
            vloss = evaluate_completion_loss(model, valid)
            vlog.row(epoch, f"{vloss:.6f}")
            path = out_dir / f"finetune_epoch_{epoch:03d}"
            save_checkpoint(model, path, {"step": step, "epoch": epoch, "valid_loss": vloss})
            if vloss < best_loss:
                best_loss, best_path = vloss, path
            logger.info("finetune epoch %d valid loss %.4f", epoch, vloss)
    finally:
        log.close()
        vlog.close()
        model.eval()
    return best_path


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
