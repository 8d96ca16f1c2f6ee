"""Corpus ingestion: documents, character vocabulary, subword lexicon, chunking."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Reserved character marking the end of a generated text. It is always a
# forced single-character segment, like whitespace.
END_OF_TEXT = "\x03"

BOS, EOS, UNK, EOT = "<bos>", "<eos>", "<unk>", "<eot>"
SPECIALS = (BOS, EOS, UNK, EOT)


class CorpusError(ValueError):
    pass


def is_forced(ch: str) -> bool:
    """Characters that always form their own one-character word."""
    return ch.isspace() or ch == END_OF_TEXT


def _word_starts(text: str, boundaries: Iterable[int] = ()) -> np.ndarray:
    extra = set(boundaries)
    starts = np.zeros(len(text), dtype=np.int64)
    current = 0
    for k, ch in enumerate(text):
        if k == 0 or k in extra or is_forced(ch) or is_forced(text[k - 1]):
            current = k
        starts[k] = current
    return starts


@dataclass(frozen=True)
class Document:
    """A character sequence with its word-extent map.

    ``word_start[k]`` is the 0-based index of the first character of the word
    containing position ``k``. Whitespace (and the end-of-text marker) is its
    own word. ``boundaries`` adds word breaks *before* the given offsets, which
    is how a prompt's context is closed off from its completion.
    """

    text: str
    word_start: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_text(cls, text: str, boundaries: Iterable[int] = ()) -> "Document":
        ws = _word_starts(text, boundaries)
        ws.setflags(write=False)
        return cls(text, ws)

    def __len__(self) -> int:
        return len(self.text)

    def words(self) -> list[tuple[int, int]]:
        """Half-open spans of the non-whitespace words."""
        spans = []
        n = len(self.text)
        k = 0
        while k < n:
            end = k + 1
            while end < n and self.word_start[end] == k:
                end += 1
            if not is_forced(self.text[k]):
                spans.append((k, end))
            k = end
        return spans

    def is_boundary(self, k: int) -> bool:
        """True when offset ``k`` (0..n) lies between two words."""
        return k == 0 or k == len(self.text) or self.word_start[k] == k


class CharVocab:
    """Dense character ids; the four specials take ids 0..3."""

    def __init__(self, chars: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        for ch in chars:
            if ch == END_OF_TEXT or ch in self.itos:
                continue
            if len(ch) != 1:
                raise ValueError(f"not a single character: {ch!r}")
            self.itos.append(ch)
        self.id_of = {s: i for i, s in enumerate(self.itos)}
        self.id_of[END_OF_TEXT] = self.id_of[EOT]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "CharVocab":
        seen: set[str] = set()
        for t in texts:
            seen.update(t)
        return cls(sorted(seen))

    bos_id = property(lambda self: 0)
    eos_id = property(lambda self: 1)
    unk_id = property(lambda self: 2)
    eot_id = property(lambda self: 3)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, ch: str) -> bool:
        return ch in self.id_of

    def encode(self, text: str) -> np.ndarray:
        unk = self.unk_id
        return np.fromiter((self.id_of.get(c, unk) for c in text), dtype=np.int64, count=len(text))

    def char(self, idx: int) -> str:
        if idx == self.eot_id:
            return END_OF_TEXT
        return self.itos[idx]

    def emittable_ids(self) -> list[int]:
        """Ids a generator may emit: real characters plus end-of-text."""
        return [self.eot_id] + list(range(len(SPECIALS), len(self.itos)))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s in self.itos:
                fh.write(s + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CharVocab":
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[: len(SPECIALS)]) != SPECIALS:
            raise CorpusError(f"{path}: character vocabulary must list {SPECIALS} first")
        return cls(lines[len(SPECIALS):])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CharVocab) and self.itos == other.itos


class SubwordLexicon:
    """Fixed set of character n-grams; id order is rank order."""

    def __init__(self, entries: Sequence[str], max_len: int):
        self.entries = list(entries)
        self.max_len = max_len
        self.id_of = {e: i for i, e in enumerate(self.entries)}
        if len(self.id_of) != len(self.entries):
            raise ValueError("duplicate lexicon entries")
        for e in self.entries:
            if not 1 <= len(e) <= max_len:
                raise ValueError(f"lexicon entry {e!r} outside length 1..{max_len}")
            if any(is_forced(c) for c in e):
                raise ValueError(f"lexicon entry {e!r} contains whitespace")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, s: str) -> bool:
        return s in self.id_of

    def get(self, s: str, default: int = -1) -> int:
        return self.id_of.get(s, default)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self.entries:
                fh.write(e + "\n")

    @classmethod
    def load(cls, path: str | Path, max_len: int) -> "SubwordLexicon":
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, max_len)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, SubwordLexicon)
            and self.entries == other.entries
            and self.max_len == other.max_len
        )


def load_corpus(
    path: str | Path, char_vocab: CharVocab | None = None
) -> tuple[list[Document], CharVocab]:
    """Read a UTF-8 file with one document per line."""
    with open(path, encoding="utf-8", newline="") as fh:
        raw = fh.read()
    docs, skipped = [], 0
    for line in raw.split("\n"):
        line = line.rstrip("\r")
        if not line:
            continue
        if line.isspace():
            skipped += 1
            continue
        docs.append(Document.from_text(line))
    if skipped:
        logger.warning("%s: skipped %d whitespace-only line(s)", path, skipped)
    if not docs:
        raise CorpusError(f"{path}: empty corpus")
    if char_vocab is None:
        char_vocab = CharVocab.from_texts(d.text for d in docs)
    return docs, char_vocab


def count_ngrams(corpus: Iterable[Document], max_len: int) -> Counter:
    counts: Counter = Counter()
    for doc in corpus:
        text = doc.text
        for start, end in doc.words():
            for i in range(start, end):
                for j in range(i + 1, min(end, i + max_len) + 1):
                    counts[text[i:j]] += 1
    return counts


def build_lexicon(corpus: Sequence[Document], size: int, max_len: int) -> SubwordLexicon:
    """The ``size`` most frequent within-word n-grams of length <= ``max_len``.

    Ranking is by count, then shorter first, then codepoint order. Every
    single character of the corpus is kept even when it falls out of rank;
    it displaces the lowest-ranked multi-character entries.
    """
    if size < 1 or max_len < 1:
        raise ValueError("size and max_len must be positive")
    counts = count_ngrams(corpus, max_len)
    singles = {g for g in counts if len(g) == 1}
    if size < len(singles):
        raise CorpusError(
            f"lexicon size {size} is smaller than the {len(singles)} distinct characters"
        )
    ranked = sorted(counts, key=lambda g: (-counts[g], len(g), g))
    chosen = ranked[:size]
    missing = singles.difference(chosen)
    if missing:
        keep = set(chosen) | missing
        drop = [g for g in reversed(chosen) if len(g) > 1][: len(missing)]
        keep.difference_update(drop)
        chosen = [g for g in ranked if g in keep]
    return SubwordLexicon(chosen, max_len)


def batchify(corpus: Iterable[Document], max_seq_len: int) -> list[Document]:
    """Chunk documents into word-aligned training sequences.

    Whitespace at a chunk boundary is dropped. Documents are never merged.
    """
    if max_seq_len < 2:
        raise ValueError("max_seq_len must be >= 2")
    out: list[Document] = []
    for doc in corpus:
        text = doc.text
        n = len(text)
        pieces = []  # half-open word/space spans in order
        k = 0
        while k < n:
            end = k + 1
            while end < n and doc.word_start[end] == k:
                end += 1
            pieces.append((k, end))
            k = end
        for s, e in pieces:
            if e - s > max_seq_len:
                raise CorpusError(
                    f"word {text[s:e]!r} is longer than max_seq_len={max_seq_len}"
                )
        i = 0
        while i < len(pieces):
            while i < len(pieces) and is_forced(text[pieces[i][0]]) and text[pieces[i][0]] != END_OF_TEXT:
                i += 1
            if i == len(pieces):
                break
            start = pieces[i][0]
            j = i
            while j + 1 < len(pieces) and pieces[j + 1][1] - start <= max_seq_len:
                j += 1
            end = pieces[j][1]
            while end > start and text[end - 1].isspace():
                end -= 1
            out.append(_slice(doc, start, end))
            i = j + 1
    return out


def _slice(doc: Document, start: int, end: int) -> Document:
    if start == 0 and end == len(doc):
        return doc
    extra = [k - start for k in range(start + 1, end) if doc.word_start[k] == k]
    return Document.from_text(doc.text[start:end], extra)
