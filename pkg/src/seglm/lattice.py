"""Segmentation lattice: forward marginal, conditional likelihood, Viterbi, and
an exhaustive enumeration oracle.

Positions are 0-based offsets between characters: offset ``k`` sits after the
first ``k`` characters, so ``log_alpha[k]`` is the log marginal of ``c[:k]``.
A segment is a half-open span ``(start, end)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Document, is_forced
from .model import NEG_INF

MAX_ORACLE_LEN = 14


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class Segmentation:
    spans: tuple[tuple[int, int], ...]

    def pieces(self, text: str) -> list[str]:
        return [text[s:e] for s, e in self.spans]

    def to_pipe(self, text: str) -> str:
        """Segments within a word joined by ``|``; whitespace kept verbatim."""
        out = []
        prev_word = False
        for s, e in self.spans:
            piece = text[s:e]
            word = not is_forced(piece[0])
            if word and prev_word:
                out.append("|")
            out.append(piece)
            prev_word = word
        return "".join(out)

    def words(self, text: str) -> list[list[str]]:
        """Subword lists of each non-whitespace word, in order."""
        words: list[list[str]] = []
        current: list[str] = []
        for s, e in self.spans:
            piece = text[s:e]
            if is_forced(piece[0]):
                if current:
                    words.append(current)
                    current = []
            else:
                current.append(piece)
        if current:
            words.append(current)
        return words


class Lattice(NamedTuple):
    log_alpha: torch.Tensor  # (n+1,), log_alpha[0] == 0


def _ending_scores(scores: torch.Tensor) -> torch.Tensor:
    """Re-index (B, n, L) start-major scores to (B, n+1, L) end-major:
    out[b, k, l-1] scores the length-l segment ending at offset k."""
    B, n, L = scores.shape
    cols = []
    for l in range(1, L + 1):
        col = scores[:, :, l - 1]
        # segment starting at j ends at j + l
        cols.append(F.pad(col, (l, 0), value=NEG_INF)[:, : n + 1])
    return torch.stack(cols, dim=-1)


def forward_from_scores(scores: torch.Tensor) -> torch.Tensor:
    """Log forward scores (B, n+1) from a (B, n, L) segment score table.

    Summation order over candidate segments is fixed, so results are
    reproducible; the whole computation is differentiable.
    """
    B, n, L = scores.shape
    ending = _ending_scores(scores)
    # window[:, l-1] holds log_alpha[k-l]
    window = torch.full((B, L), NEG_INF, dtype=scores.dtype, device=scores.device)
    window[:, 0] = 0.0
    alphas = [window[:, 0]]
    for k in range(1, n + 1):
        a = torch.logsumexp(window + ending[:, k], dim=-1)
        alphas.append(a)
        window = torch.cat([a[:, None], window[:, :-1]], dim=1)
    return torch.stack(alphas, dim=1)


def _check_fits(model, docs: Sequence[Document]):
    limit = model.config.max_seq_len
    for doc in docs:
        if len(doc) == 0:
            raise LatticeError("empty document")
        if len(doc) > limit:
            raise LatticeError(f"document of length {len(doc)} exceeds max_seq_len={limit}")


def batch_log_alpha(model, docs: Sequence[Document]) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward scores for a batch of documents, plus their lengths."""
    _check_fits(model, docs)
    batch = model.prepare_batch(docs)
    return forward_from_scores(model.segment_scores(batch)), batch.lengths


def batch_log_marginal(model, docs: Sequence[Document]) -> torch.Tensor:
    log_alpha, lengths = batch_log_alpha(model, docs)
    return log_alpha.gather(1, lengths[:, None]).squeeze(1)


def batch_conditional(model, docs: Sequence[Document], context_lens: Sequence[int]) -> torch.Tensor:
    """log p(O | C) per document, where C is the first ``context_lens[b]`` chars."""
    for doc, c in zip(docs, context_lens):
        _check_context(doc, c)
    log_alpha, lengths = batch_log_alpha(model, docs)
    ctx = torch.as_tensor(list(context_lens), device=log_alpha.device)
    return (
        log_alpha.gather(1, lengths[:, None]).squeeze(1)
        - log_alpha.gather(1, ctx[:, None]).squeeze(1)
    )


def forward_marginal(model, doc: Document) -> tuple[torch.Tensor, Lattice]:
    """log p(D) summed over every legal segmentation, and the lattice."""
    log_alpha, _ = batch_log_alpha(model, [doc])
    lat = Lattice(log_alpha[0])
    return lat.log_alpha[len(doc)], lat


def _check_context(doc: Document, context_len: int, allow_mid_word: bool = False):
    if not 0 <= context_len <= len(doc):
        raise LatticeError(f"context length {context_len} outside [0, {len(doc)}]")
    if not allow_mid_word and not doc.is_boundary(context_len):
        raise LatticeError(f"context length {context_len} does not end at a word boundary")


def conditional_log_likelihood(
    model, doc: Document, context_len: int, allow_mid_word: bool = False
) -> torch.Tensor:
    """log p(O | C) = log_alpha[n] - log_alpha[|C|] from one forward pass.

    The context must end at a word boundary unless ``allow_mid_word`` is set;
    a mid-word ratio is still a valid number but not a segmentation-consistent
    conditional, since segments may not straddle the cut.
    """
    _check_context(doc, context_len, allow_mid_word)
    _, lat = forward_marginal(model, doc)
    return lat.log_alpha[len(doc)] - lat.log_alpha[context_len]


def viterbi_from_scores(scores: np.ndarray, length: int) -> tuple[Segmentation, float]:
    """Best segmentation of the first ``length`` positions of a (n, L) table.

    On ties the longer final segment wins.
    """
    L = scores.shape[1]
    best = np.full(length + 1, -np.inf)
    back = np.zeros(length + 1, dtype=np.int64)
    best[0] = 0.0
    for k in range(1, length + 1):
        for l in range(min(L, k), 0, -1):
            cand = best[k - l] + scores[k - l, l - 1]
            if cand > best[k]:
                best[k] = cand
                back[k] = l
    spans = []
    k = length
    while k > 0:
        l = int(back[k])
        spans.append((k - l, k))
        k -= l
    return Segmentation(tuple(reversed(spans))), float(best[length])


@torch.no_grad()
def viterbi_batch(model, docs: Sequence[Document]) -> list[tuple[Segmentation, float]]:
    _check_fits(model, docs)
    batch = model.prepare_batch(docs)
    table = model.segment_scores(batch).double().cpu().numpy()
    return [viterbi_from_scores(table[b], len(doc)) for b, doc in enumerate(docs)]


def viterbi(model, doc: Document) -> tuple[Segmentation, float]:
    """The single most probable segmentation and its joint log-probability."""
    return viterbi_batch(model, [doc])[0]


def _word_compositions(start: int, end: int, L: int):
    m = end - start
    for cuts in itertools.product((False, True), repeat=m - 1):
        spans, s = [], start
        for i, cut in enumerate(cuts, start=start + 1):
            if cut:
                spans.append((s, i))
                s = i
        spans.append((s, end))
        if all(e - b <= L for b, e in spans):
            yield spans


def enumerate_segmentations(doc: Document, L: int) -> list[Segmentation]:
    """Every legal segmentation, by brute force over cut positions."""
    if len(doc) > MAX_ORACLE_LEN:
        raise LatticeError(f"document too long to enumerate (n={len(doc)} > {MAX_ORACLE_LEN})")
    parts = []
    k = 0
    n = len(doc)
    while k < n:
        end = k + 1
        while end < n and doc.word_start[end] == k:
            end += 1
        parts.append(list(_word_compositions(k, end, L)))
        k = end
    return [
        Segmentation(tuple(span for word in combo for span in word))
        for combo in itertools.product(*parts)
    ]


@torch.no_grad()
def enumerate_oracle(model, doc: Document) -> list[tuple[Segmentation, float]]:
    """All segmentations with their chain-rule log-probabilities.

    Segment scores come from ``model.segment_log_prob`` one span at a time,
    not from the vectorised table the lattice uses.
    """
    segs = enumerate_segmentations(doc, model.max_segment_len)
    enc = model.encode(doc)
    cache: dict[tuple[int, int], float] = {}
    out = []
    for seg in segs:
        total = 0.0
        for span in seg.spans:
            if span not in cache:
                cache[span] = float(model.segment_log_prob(enc, *span))
            total += cache[span]
        out.append((seg, total))
    return out
