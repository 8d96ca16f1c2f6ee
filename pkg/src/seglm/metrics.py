"""Generation quality: corpus chrF, corpus BLEU and degeneration rate."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .decoding import DecodeConfig, detect_degeneration, dynamic_decode
from .training import render_prompt

logger = logging.getLogger(__name__)

CHRF_ORDER = 6
CHRF_BETA = 2.0
BLEU_ORDER = 4
BLEU_SMOOTHING = "add-one on n-gram orders 2-4 (add-k, k=1), whitespace tokens, corpus level"


class MetricError(ValueError):
    pass


def _as_lists(hyps, refs) -> tuple[list[str], list[str]]:
    if isinstance(hyps, str):
        hyps = [hyps]
    if isinstance(refs, str):
        refs = [refs]
    hyps, refs = list(hyps), list(refs)
    if len(hyps) != len(refs):
        raise MetricError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not refs:
        raise MetricError("no references")
    if any(not r.strip() for r in refs):
        raise MetricError("empty reference")
    return hyps, refs


def _ngrams(items: Sequence, n: int) -> Counter:
    return Counter(tuple(items[i : i + n]) for i in range(len(items) - n + 1))


def chrf(hypotheses: str | Sequence[str], references: str | Sequence[str]) -> float:
    """Character n-gram F-score (orders 1-6, beta 2) on a 0-100 scale.

    Whitespace is dropped before extracting n-grams. With lists, n-gram
    statistics are summed over the corpus before scoring; a pair whose
    reference is too short for some order adds nothing at that order.
    Precision and recall are averaged over the orders for which both sides
    have n-grams.
    """
    hyps, refs = _as_lists(hypotheses, references)
    stats = [[0, 0, 0] for _ in range(CHRF_ORDER)]  # hyp, ref, match
    for h, r in zip(hyps, refs):
        h, r = "".join(h.split()), "".join(r.split())
        for n in range(1, CHRF_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            s = stats[n - 1]
            # hypothesis n-grams only count where the reference has some
            s[0] += sum(hc.values()) if rc else 0
            s[1] += sum(rc.values())
            s[2] += sum((hc & rc).values())
    prec = rec = 0.0
    order = 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp > 0 and n_ref > 0:
            prec += n_match / n_hyp
            rec += n_match / n_ref
            order += 1
    if order:
        prec, rec = prec / order, rec / order
    b2 = CHRF_BETA**2
    if prec + rec == 0:
        return 0.0
    return 100 * (1 + b2) * prec * rec / (b2 * prec + rec)


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus 4-gram BLEU over whitespace tokens, 0-100.

    Orders 2-4 get one added to both matched and total counts; the brevity
    penalty uses summed lengths. A corpus with no matching unigram scores 0.
    """
    hyps, refs = _as_lists(hypotheses, references)
    correct = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    sys_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = h.split(), r.split()
        sys_len += len(ht)
        ref_len += len(rt)
        for n in range(1, BLEU_ORDER + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            correct[n - 1] += sum((hc & rc).values())
            total[n - 1] += sum(hc.values())
    if not any(correct):
        return 0.0
    log_prec = 0.0
    for n in range(BLEU_ORDER):
        c, t = (correct[n] + 1, total[n] + 1) if n else (correct[n], total[n])
        if c == 0:
            return 0.0
        log_prec += math.log(c / t)
    bp = 1.0 if sys_len >= ref_len else math.exp(1 - ref_len / sys_len)
    return 100 * bp * math.exp(log_prec / BLEU_ORDER)


@dataclass
class EvalReport:
    chrf: float
    bleu: float
    deg_pct: float
    n_examples: int

    def __post_init__(self):
        for name in ("chrf", "bleu", "deg_pct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0 + 1e-9:
                raise MetricError(f"{name}={v} outside [0, 100]")

    def to_json(self, config: dict | None = None) -> str:
        body = {
            "bleu_smoothing": BLEU_SMOOTHING,
            "chrf_params": {"char_order": CHRF_ORDER, "beta": CHRF_BETA, "level": "corpus"},
            **asdict(self),
            "config": config or {},
        }
        return json.dumps(body, indent=2, sort_keys=False)


def load_testset(path: str | Path) -> list[tuple[str, str]]:
    """``prompt<TAB>reference`` per line; blank lines skipped."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            prompt, sep, ref = line.partition("\t")
            if not sep:
                raise MetricError(f"{path}:{lineno}: expected prompt<TAB>reference")
            pairs.append((prompt, ref))
    return pairs


def evaluate(
    model,
    testset: Sequence[tuple[str, str]],
    decode_config: DecodeConfig | None = None,
    out_tsv: str | Path | None = None,
    render: bool = True,
    max_repeats: int = 3,
    max_word_len: int = 30,
) -> EvalReport:
    """Decode every prompt and score the completions against the references.

    Prompts are rendered with the prompt marker unless ``render`` is False.
    A prompt whose decoding raises or fails counts as degenerate with reason
    ``decode-failure`` and contributes an empty hypothesis.
    """
    if not testset:
        raise MetricError("empty test set")
    decode_config = decode_config or DecodeConfig()
    rows = []
    for prompt, ref in testset:
        text = render_prompt(prompt) if render else prompt
        try:
            result = dynamic_decode(model, text, decode_config)
        except Exception as exc:
            logger.warning("decode failed for %r: %s", prompt, exc)
            result = None
        if result is None or result.failed:
            rows.append((prompt, "", ref, True, "decode-failure"))
            continue
        deg, reason = detect_degeneration(result.text, max_repeats, max_word_len)
        rows.append((prompt, result.text, ref, deg, reason))

    hyps = [r[1] for r in rows]
    refs = [r[2] for r in rows]
    n_deg = sum(r[3] for r in rows)
    report = EvalReport(chrf(hyps, refs), bleu(hyps, refs), 100.0 * n_deg / len(rows), len(rows))
    if out_tsv is not None:
        with open(out_tsv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
            w.writerow(["prompt", "hypothesis", "reference", "degenerate", "reason"])
            for prompt, hyp, ref, deg, reason in rows:
                w.writerow([prompt, hyp, ref, int(deg), reason])
    return report
