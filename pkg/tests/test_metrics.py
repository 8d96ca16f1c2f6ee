import csv
import json
import random
from pathlib import Path

import pytest

from seglm.corpus import END_OF_TEXT
from seglm.decoding import DecodeConfig
from seglm.metrics import EvalReport, MetricError, bleu, chrf, evaluate, load_testset
from stubs import ToyDecoder

FIXTURES = Path(__file__).parent / "fixtures"

# computed with sacrebleu 2.x (CHRF defaults; BLEU tokenize="none", smooth_method="add-k")
MT20_CHRF = 58.80659035581986
MT20_BLEU = 39.89816837537775


def _mt20():
    pairs = load_testset(FIXTURES / "mt20.tsv")
    return [h for h, _ in pairs], [r for _, r in pairs]


def test_frozen_reference_values():
    hyps, refs = _mt20()
    assert len(hyps) == 20
    assert chrf(hyps, refs) == pytest.approx(MT20_CHRF, abs=1e-9)
    assert bleu(hyps, refs) == pytest.approx(MT20_BLEU, abs=1e-9)


def test_chrf_single_pair():
    assert chrf("abcd", "abce") == pytest.approx(47.91666666666667, abs=1e-12)


def test_identity_and_disjoint():
    refs = ["the cat sat on the mat", "a b c d e"]
    assert chrf(refs, refs) == pytest.approx(100.0)
    assert bleu(refs, refs) == pytest.approx(100.0)
    assert chrf(["xyz"], ["abc"]) == 0.0
    assert bleu(["xyz"], ["abc"]) == 0.0


def test_empty_hypotheses_score_zero():
    assert chrf(["", ""], ["ab", "cd"]) == 0.0
    assert bleu(["", ""], ["ab", "cd"]) == 0.0


def test_input_errors():
    with pytest.raises(MetricError):
        chrf(["a"], ["a", "b"])
    with pytest.raises(MetricError):
        bleu([], [])
    with pytest.raises(MetricError):
        chrf(["a"], [" "])


def test_agrees_with_sacrebleu_on_random_corpora():
    sacrebleu = pytest.importorskip("sacrebleu")
    rnd = random.Random(0)
    words = ["a", "ab", "ba", "abc", "c", "cab", "bb"]

    def sentence(lo):
        return " ".join(rnd.choice(words) for _ in range(rnd.randint(lo, 8)))

    for _ in range(100):
        n = rnd.randint(1, 4)
        hyps = [sentence(0) for _ in range(n)]
        refs = [sentence(1) for _ in range(n)]
        want_c = sacrebleu.metrics.CHRF().corpus_score(hyps, [refs]).score
        want_b = sacrebleu.metrics.BLEU(tokenize="none", smooth_method="add-k").corpus_score(hyps, [refs]).score
        assert chrf(hyps, refs) == pytest.approx(want_c, abs=1e-9)
        assert bleu(hyps, refs) == pytest.approx(want_b, abs=1e-9)


def test_report_range_and_json():
    with pytest.raises(MetricError):
        EvalReport(101.0, 0.0, 0.0, 1)
    body = json.loads(EvalReport(50.0, 20.0, 25.0, 4).to_json({"beam_size": 5}))
    assert body["deg_pct"] == 25.0 and body["config"] == {"beam_size": 5}
    assert body["chrf_params"]["char_order"] == 6 and "add-one" in body["bleu_smoothing"]


def test_load_testset_errors(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("no tab here\n", encoding="utf-8")
    with pytest.raises(MetricError):
        load_testset(p)


def _echo_decoder(answers):
    """Scripted decoder that completes each prompt with a fixed string."""
    script = {}
    for prompt, out in answers.items():
        for i, ch in enumerate(out + END_OF_TEXT):
            script[(prompt + out[:i], "")] = ch
            script[(prompt + out[:i], ch)] = "<eos>"
    return ToyDecoder(alphabet="abcdxyz ", max_segment_len=1, script=script, lexicon=())


def test_evaluate_degeneration_rate_and_examples(tmp_path):
    answers = {"p": "ab", "q": "x x x", "r": "cd", "s": "ab cd"}
    testset = [("p", "ab"), ("q", "x y"), ("r", "cd"), ("s", "ab cd")]
    out = tmp_path / "ex.tsv"
    report = evaluate(_echo_decoder(answers), testset, DecodeConfig(1, 10), out_tsv=out, render=False)
    assert report.n_examples == 4
    assert report.deg_pct == 25.0
    assert report.chrf == pytest.approx(chrf(list(answers.values()), [r for _, r in testset]))
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    assert rows[0] == ["prompt", "hypothesis", "reference", "degenerate", "reason"]
    assert [r[1] for r in rows[1:]] == list(answers.values())
    assert [r[3] for r in rows[1:]] == ["0", "1", "0", "0"]


def test_evaluate_records_decode_failure():
    dead = ToyDecoder(alphabet="x", script={("p", ""): "<eos>"}, lexicon=())
    report = evaluate(dead, [("p", "ref")], DecodeConfig(1, 3), render=False)
    assert report.deg_pct == 100.0 and report.chrf == 0.0
    with pytest.raises(MetricError):
        evaluate(dead, [])
