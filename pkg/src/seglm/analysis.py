"""Segmentation analysis: fertility, productivity, idiosyncrasy, morphological
boundary alignment, and per-checkpoint trajectories."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from .checkpoint import load_checkpoint
from .corpus import Document, batchify, is_forced
from .lattice import viterbi_batch

logger = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


@dataclass
class SegmentedCorpus:
    """Documents as lists of words, each word a list of subwords."""

    docs: list[list[list[str]]]
    source: str = ""

    def __post_init__(self):
        for doc in self.docs:
            for word in doc:
                if not word or any(not s for s in word):
                    raise AnalysisError(f"empty subword in {word!r}")
                if any(is_forced(c) for s in word for c in s):
                    raise AnalysisError(f"whitespace inside a subword: {word!r}")

    def words(self) -> Iterable[list[str]]:
        for doc in self.docs:
            yield from doc

    @classmethod
    def from_pipe_lines(cls, lines: Iterable[str], source: str = "") -> "SegmentedCorpus":
        docs = []
        for line in lines:
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            docs.append([w.split("|") for w in line.split()])
        return cls(docs, source)

    @classmethod
    def from_pipe_file(cls, path: str | Path, source: str | None = None) -> "SegmentedCorpus":
        with open(path, encoding="utf-8") as fh:
            return cls.from_pipe_lines(fh, source if source is not None else str(path))

    def to_pipe_lines(self) -> list[str]:
        return [" ".join("|".join(w) for w in doc) for doc in self.docs]


def load_gold(path: str | Path) -> dict[str, list[str]]:
    """Gold morphology TSV: ``word<TAB>morph1|morph2|...`` per line."""
    gold: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            word, sep, morphs = line.partition("\t")
            if not sep:
                raise AnalysisError(f"{path}:{lineno}: expected word<TAB>morphemes")
            parts = morphs.split("|")
            if "".join(parts) != word:
                raise AnalysisError(f"{path}:{lineno}: morphemes do not spell {word!r}")
            gold[word] = parts
    return gold


def fertility(seg: SegmentedCorpus) -> float:
    """Mean number of subwords per word token."""
    n_words = n_sub = 0
    for w in seg.words():
        n_words += 1
        n_sub += len(w)
    if not n_words:
        raise AnalysisError("fertility of an empty corpus")
    return n_sub / n_words


def fertility_histogram(seg: SegmentedCorpus) -> dict[int, int]:
    return dict(sorted(Counter(len(w) for w in seg.words()).items()))


def word_frequencies(seg: SegmentedCorpus) -> Counter:
    return Counter("".join(w) for w in seg.words())


def _types_by_subword(seg: SegmentedCorpus) -> dict[str, set[str]]:
    types: dict[str, set[str]] = defaultdict(set)
    for w in seg.words():
        word = "".join(w)
        for s in w:
            types[s].add(word)
    return types


def subword_stats(seg: SegmentedCorpus) -> dict[str, tuple[int, float]]:
    """Productivity and idiosyncrasy of every produced subword.

    Productivity is the number of word types whose segmentation contains the
    subword; idiosyncrasy is the mean token frequency of those types.
    """
    freq = word_frequencies(seg)
    return {
        s: (len(ws), sum(freq[w] for w in ws) / len(ws))
        for s, ws in _types_by_subword(seg).items()
    }


def productivity(seg: SegmentedCorpus, subword: str) -> int:
    ws = _types_by_subword(seg).get(subword)
    if not ws:
        raise AnalysisError(f"subword {subword!r} is never produced")
    return len(ws)


def idiosyncrasy(seg: SegmentedCorpus, subword: str) -> float:
    ws = _types_by_subword(seg).get(subword)
    if not ws:
        raise AnalysisError(f"subword {subword!r} is never produced")
    freq = word_frequencies(seg)
    return sum(freq[w] for w in ws) / len(ws)


def _boundaries(parts: Sequence[str]) -> set[int]:
    out, k = set(), 0
    for p in parts[:-1]:
        k += len(p)
        out.add(k)
    return out


def preferred_segmentations(seg: SegmentedCorpus) -> dict[str, list[str]]:
    """One segmentation per word type: its most frequent one, earliest on ties."""
    counts: dict[str, Counter] = defaultdict(Counter)
    for w in seg.words():
        counts["".join(w)][tuple(w)] += 1
    # Counter.most_common keeps insertion order among equal counts
    return {word: list(c.most_common(1)[0][0]) for word, c in counts.items()}


def morph_boundary_prf(
    seg: SegmentedCorpus, gold: dict[str, list[str]]
) -> tuple[float, float, float]:
    """Micro-averaged boundary precision, recall and F1 over gold word types.

    Boundaries are internal character offsets. Precision is 0 when nothing
    is predicted.
    """
    pred = preferred_segmentations(seg)
    shared = [w for w in pred if w in gold]
    if not shared:
        raise AnalysisError("no word of the segmented corpus appears in the gold data")
    tp = n_pred = n_gold = 0
    for w in shared:
        p, g = _boundaries(pred[w]), _boundaries(gold[w])
        tp += len(p & g)
        n_pred += len(p)
        n_gold += len(g)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def segment_corpus(model, docs: Sequence[Document], source: str = "", batch_size: int = 32):
    """Viterbi segmentation of ``docs``, chunked to the model's length limit."""
    seqs = batchify(docs, model.config.max_seq_len)
    out = []
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i : i + batch_size]
        for (segm, _), doc in zip(viterbi_batch(model, chunk), chunk):
            out.append(segm.words(doc.text))
    return SegmentedCorpus(out, source)


def segment_texts(model, texts: Sequence[str], batch_size: int = 32) -> list[str]:
    """Pipe-format Viterbi segmentation of each text.

    Texts longer than the model's context are cut into word-aligned chunks;
    whitespace between chunks is copied through unchanged.
    """
    chunks: list[Document] = []
    owner: list[int] = []
    for i, text in enumerate(texts):
        for c in batchify([Document.from_text(text)], model.config.max_seq_len):
            chunks.append(c)
            owner.append(i)
    pipes: list[str] = []
    for i in range(0, len(chunks), batch_size):
        part = chunks[i : i + batch_size]
        pipes.extend(s.to_pipe(d.text) for (s, _), d in zip(viterbi_batch(model, part), part))

    by_text: dict[int, list[tuple[Document, str]]] = defaultdict(list)
    for c, pipe, o in zip(chunks, pipes, owner):
        by_text[o].append((c, pipe))
    out = []
    for i, text in enumerate(texts):
        pieces, pos = [], 0
        for c, pipe in by_text[i]:
            at = text.index(c.text, pos)
            pieces.append(text[pos:at])
            pieces.append(pipe)
            pos = at + len(c.text)
        pieces.append(text[pos:])
        out.append("".join(pieces))
    return out


@dataclass
class TrajectoryRow:
    checkpoint: str
    fertility: float
    mean_productivity: float
    mean_idiosyncrasy: float
    morph_p: float
    morph_r: float
    morph_f1: float


@dataclass
class TrajectoryReport:
    rows: list[TrajectoryRow] = field(default_factory=list)
    histograms: dict[str, dict[int, int]] = field(default_factory=dict)
    failed: list[str] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f.name for f in fields(TrajectoryRow)])
            for row in self.rows:
                w.writerow(_fmt(v) for v in astuple(row))

    def write_histogram_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint", "subwords_per_word", "count"])
            for ckpt, hist in self.histograms.items():
                for k, c in hist.items():
                    w.writerow([ckpt, k, c])


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def analyse(seg: SegmentedCorpus, gold: dict[str, list[str]] | None, name: str) -> TrajectoryRow:
    stats = subword_stats(seg)
    prods = [p for p, _ in stats.values()]
    idios = [i for _, i in stats.values()]
    p = r = f = math.nan
    if gold:
        p, r, f = morph_boundary_prf(seg, gold)
    return TrajectoryRow(
        name, fertility(seg), sum(prods) / len(prods), sum(idios) / len(idios), p, r, f
    )


def build_trajectory(
    checkpoints: Sequence[str | Path | SegmentedCorpus],
    eval_corpus: Sequence[Document],
    gold: dict[str, list[str]] | None,
) -> TrajectoryReport:
    """One row of metrics per checkpoint.

    Items may be checkpoint directories (segmented here with Viterbi),
    pipe-format files, or ready ``SegmentedCorpus`` objects, e.g. the output
    of an external tokenizer. A checkpoint that fails to load gives a row of
    NaNs and is listed in ``report.failed``.
    """
    report = TrajectoryReport()
    for item in checkpoints:
        if isinstance(item, SegmentedCorpus):
            name, seg = item.source or f"corpus{len(report.rows)}", item
        else:
            name = str(item)
            try:
                if Path(item).is_file():
                    seg = SegmentedCorpus.from_pipe_file(item)
                else:
                    seg = segment_corpus(load_checkpoint(item), eval_corpus, name)
            except Exception as exc:  # keep going: one bad checkpoint must not sink the run
                logger.error("checkpoint %s failed: %s", item, exc)
                report.failed.append(name)
                report.rows.append(TrajectoryRow(name, *([math.nan] * 6)))
                continue
        report.rows.append(analyse(seg, gold, name))
        report.histograms[name] = fertility_histogram(seg)
    return report
