"""Dynamic beam search over characters and segment boundaries, and the
degeneration detector."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import torch

from .corpus import END_OF_TEXT, is_forced
from .lattice import Segmentation
from .model import NEG_INF

# hypotheses scoring below this are treated as impossible
_DEAD = NEG_INF / 2


@dataclass
class DecodeConfig:
    beam_size: int = 5
    max_new_chars: int = 200

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_new_chars < 0:
            raise ValueError("max_new_chars must be >= 0")


@dataclass(frozen=True)
class Hypothesis:
    text: str
    seg_start: int  # offset in ``text`` where the open segment begins
    boundaries: tuple[int, ...]  # committed segment end offsets
    score: float  # closed segments in full, open segment provisionally
    open_score: float = 0.0  # character-head log-prob of the open prefix

    def segments(self) -> list[str]:
        cuts = (0,) + self.boundaries
        return [self.text[a:b] for a, b in zip(cuts, cuts[1:])]


@dataclass
class DecodeResult:
    text: str
    segments: list[str] = field(default_factory=list)
    score: float = -math.inf
    ended: bool = False  # emitted end-of-text rather than hitting the length cap
    failed: bool = False

    def to_pipe(self) -> str:
        spans, k = [], 0
        for s in self.segments:
            spans.append((k, k + len(s)))
            k += len(s)
        return Segmentation(tuple(spans)).to_pipe(self.text)


class _Scorer:
    """Caches backbone states and head outputs for one decode call."""

    def __init__(self, model, prompt: str):
        self.model = model
        self.prompt = prompt
        self.vocab = model.vocab
        self._states: dict[str, torch.Tensor] = {}
        self._steps: dict[tuple[str, tuple[int, ...]], torch.Tensor] = {}

    def state(self, generated: str):
        h = self._states.get(generated)
        if h is None:
            h = self.model.context_state(self.prompt + generated)
            self._states[generated] = h
        return h

    def step(self, generated_before: str, prefix: tuple[int, ...]) -> torch.Tensor:
        key = (generated_before, prefix)
        lp = self._steps.get(key)
        if lp is None:
            lp = self.model.char_step_log_probs(self.state(generated_before), list(prefix))
            self._steps[key] = lp
        return lp

    def segment(self, generated_before: str, seg: str) -> float:
        """Full mixture log-probability of ``seg`` opening after ``generated_before``."""
        h = self.state(generated_before)
        ids = tuple(int(self.vocab.id_of.get(c, self.vocab.unk_id)) for c in seg)
        char_lp = 0.0
        for m in range(len(ids)):
            char_lp += float(self.step(generated_before, ids[:m])[ids[m]])
        char_lp += float(self.step(generated_before, ids)[self.vocab.eos_id])
        log_phi, log_1m = self.model.mixture_log_weights(h)
        lex_id = self.model.lexicon.get(seg)
        lex_lp = float(self.model.lexicon_log_probs(h)[lex_id]) if lex_id >= 0 else NEG_INF
        return float(torch.logaddexp(
            torch.tensor(float(log_phi) + char_lp, dtype=torch.float64),
            torch.tensor(float(log_1m) + lex_lp, dtype=torch.float64),
        ))


def _close(sc: _Scorer, hyp: Hypothesis) -> tuple[float, tuple[int, ...]]:
    """Score and boundaries after closing the open segment, if any."""
    if hyp.seg_start == len(hyp.text):
        return hyp.score, hyp.boundaries
    before = hyp.text[: hyp.seg_start]
    full = sc.segment(before, hyp.text[hyp.seg_start:])
    return hyp.score - hyp.open_score + full, hyp.boundaries + (len(hyp.text),)


def _expand(sc: _Scorer, hyp: Hypothesis, L: int):
    """Yield (hypothesis, finished) successors emitting one more character."""
    vocab = sc.vocab
    text = hyp.text
    m = len(text) - hyp.seg_start
    closed_score, closed_bounds = _close(sc, hyp)

    if 1 <= m < L:
        prefix = tuple(int(vocab.id_of.get(c, vocab.unk_id)) for c in text[hyp.seg_start:])
        cont = sc.step(text[: hyp.seg_start], prefix)
    else:
        cont = None
    first = sc.step(text, ())

    for cid in vocab.emittable_ids():
        ch = vocab.char(cid)
        if is_forced(ch):
            s = sc.segment(text, ch)
            if ch == END_OF_TEXT:
                yield Hypothesis(text, len(text), closed_bounds, closed_score + s), True
            else:
                new_text = text + ch
                yield Hypothesis(
                    new_text, len(new_text), closed_bounds + (len(new_text),), closed_score + s
                ), False
            continue
        if cont is not None:
            lp = float(cont[cid])
            yield Hypothesis(
                text + ch, hyp.seg_start, hyp.boundaries, hyp.score + lp, hyp.open_score + lp
            ), False
        lp = float(first[cid])
        yield Hypothesis(text + ch, len(text), closed_bounds, closed_score + lp, lp), False


def _search(model, prompt: str, config: DecodeConfig) -> list[tuple[Hypothesis, bool]]:
    """All finished hypotheses, each flagged True if it emitted end-of-text."""
    sc = _Scorer(model, prompt)
    L = model.max_segment_len
    beam = [Hypothesis("", 0, (), 0.0)]
    finished: list[tuple[Hypothesis, bool]] = []
    while beam:
        candidates = []
        for hyp in beam:
            if len(hyp.text) >= config.max_new_chars:
                score, bounds = _close(sc, hyp)
                if score > _DEAD:
                    finished.append((Hypothesis(hyp.text, len(hyp.text), bounds, score), False))
                continue
            for succ, done in _expand(sc, hyp, L):
                if succ.score <= _DEAD:
                    continue
                if done:
                    finished.append((succ, True))
                else:
                    candidates.append(succ)
        # stable sort keeps expansion order among equal scores
        candidates.sort(key=lambda h: -h.score)
        beam = candidates[: config.beam_size]
    return finished


@torch.no_grad()
def dynamic_decode(model, prompt: str, config: DecodeConfig | None = None) -> DecodeResult:
    """Generate a continuation of ``prompt`` one character at a time.

    Each hypothesis either extends its open segment with a character scored
    by the character head, or closes it (rescoring the closed segment under
    the full lexicon/character mixture) and opens a new one. Whitespace and
    end-of-text always close the open segment and form one-character
    segments. Hypotheses are ranked by total log-probability; the best one
    that finished (end-of-text or length cap) is returned. The length cap is
    ``max_new_chars`` or the room left in the context window, if smaller.
    """
    config = config or DecodeConfig()
    limit = model.config.max_seq_len
    if len(prompt) > limit:
        raise ValueError(f"prompt ({len(prompt)} chars) exceeds max_seq_len={limit}")
    # generation stops where the context window ends
    room = limit - len(prompt)
    if config.max_new_chars > room:
        config = DecodeConfig(config.beam_size, room)
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        finished = _search(model, prompt, config)
    finally:
        if was_training:
            model.train()
    if not finished:
        return DecodeResult("", failed=True)
    best, ended = max(finished, key=lambda item: item[0].score)
    return DecodeResult(best.text, best.segments(), best.score, ended=ended)


def detect_degeneration(text: str, max_repeats: int = 3, max_word_len: int = 30) -> tuple[bool, str]:
    """Flag repetitive output: a whitespace-delimited word occurring at least
    ``max_repeats`` times anywhere, or any word longer than ``max_word_len``."""
    words = text.split()
    for w in words:
        if len(w) > max_word_len:
            return True, f"word longer than {max_word_len} characters: {w!r}"
    counts = Counter(words)
    for w in words:
        if counts[w] >= max_repeats:
            return True, f"word repeated {counts[w]} times: {w!r}"
    return False, ""
