"""Synthetic agglutinative corpora with known morpheme boundaries."""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np


@dataclass
class SyntheticCorpus:
    lines: list[str]
    morphemes: list[str]
    gold: dict[str, list[str]]  # word -> morphemes


def make_morphemes(n: int, rng: np.random.Generator, min_len=2, max_len=4,
                   alphabet: str = string.ascii_lowercase) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        length = int(rng.integers(min_len, max_len + 1))
        m = "".join(rng.choice(list(alphabet), size=length))
        if m not in seen:
            seen.add(m)
            out.append(m)
    return out


def make_corpus(
    n_words: int = 5000,
    n_morphemes: int = 30,
    morphs_per_word: tuple[int, int] = (2, 3),
    words_per_line: int = 10,
    seed: int = 0,
) -> SyntheticCorpus:
    """Words are concatenations of uniformly drawn morphemes.

    A word string that can be produced by two different morpheme sequences
    keeps the first decomposition drawn.
    """
    rng = np.random.default_rng(seed)
    morphemes = make_morphemes(n_morphemes, rng)
    gold: dict[str, list[str]] = {}
    words = []
    lo, hi = morphs_per_word
    for _ in range(n_words):
        k = int(rng.integers(lo, hi + 1))
        parts = [morphemes[i] for i in rng.integers(0, n_morphemes, size=k)]
        w = "".join(parts)
        gold.setdefault(w, parts)
        words.append(w)
    lines = [
        " ".join(words[i : i + words_per_line]) for i in range(0, len(words), words_per_line)
    ]
    return SyntheticCorpus(lines, morphemes, gold)
