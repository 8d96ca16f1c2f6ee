import csv
import json
import shutil
import subprocess

import pytest

from seglm.cli import DEFAULTS, resolve_settings, run

TINY = ["--set", "layers=1", "--set", "heads=2", "--set", "embed_dim=8", "--set", "max_seq_len=48",
        "--set", "lexicon_size=10", "--set", "max_segment_len=3", "--set", "batch_size=2"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.txt"
    corpus.write_text("ab ba abab\nba ab\nabba ab ba\n", encoding="utf-8")
    assert run(["build-lexicon", "--corpus", str(corpus), "--out", str(root / "lex"), *TINY]) == 0
    rc = run(["pretrain", "--corpus", str(corpus), "--lexicon", str(root / "lex"),
              "--out", str(root / "ck"), *TINY, "--set", "epochs=2"])
    assert rc == 0
    return root


def test_build_lexicon_outputs(trained):
    lex = trained / "lex"
    assert {p.name for p in lex.iterdir()} == {"lexicon.txt", "vocab.txt", "resolved_config.txt"}
    snapshot = (lex / "resolved_config.txt").read_text().splitlines()
    assert snapshot[0].startswith("# seglm build-lexicon")
    assert "lexicon_size=10" in snapshot


def test_pretrain_writes_scheduled_checkpoints(trained):
    ckpts = sorted(p.name for p in (trained / "ck").glob("step_*"))
    # 3 documents, batch 2 -> 2 steps per epoch, 4 in total
    assert ckpts == ["step_00000001", "step_00000002", "step_00000003", "step_00000004"]
    assert (trained / "ck" / "resolved_config.txt").exists()


def test_segment_generate_analyze_evaluate(trained, tmp_path):
    ck = str(trained / "ck" / "step_00000004")
    text = tmp_path / "in.txt"
    text.write_text("abab ba\nab\n", encoding="utf-8")

    out = tmp_path / "seg.txt"
    assert run(["segment", "--ckpt", ck, "--in", str(text), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert [l.replace("|", "") for l in lines] == ["abab ba", "ab"]
    assert (tmp_path / "seg.txt.config.txt").exists()

    gen = tmp_path / "gen.txt"
    assert run(["generate", "--ckpt", ck, "--in", str(text), "--out", str(gen),
                "--pipe-out", str(tmp_path / "gen_pipe.txt"), "--set", "max_new_chars=4"]) == 0
    assert len(gen.read_text().splitlines()) == 2

    gold = tmp_path / "gold.tsv"
    gold.write_text("abab\tab|ab\n", encoding="utf-8")
    traj = tmp_path / "traj.csv"
    ckpts = ",".join([str(trained / "ck" / "step_00000001"), ck, str(out), str(tmp_path / "nope")])
    assert run(["analyze", "--ckpts", ckpts, "--eval", str(text), "--gold", str(gold), "--out", str(traj)]) == 0
    with open(traj) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and rows[-1]["fertility"] == "nan"
    assert (tmp_path / "traj_hist.csv").exists()

    test = tmp_path / "test.tsv"
    test.write_text("ab\tba\nba\tab\n", encoding="utf-8")
    report = tmp_path / "report.json"
    assert run(["evaluate", "--ckpt", ck, "--test", str(test), "--out", str(report),
                "--set", "max_new_chars=4", "--set", "beam_size=2"]) == 0
    body = json.loads(report.read_text())
    assert body["n_examples"] == 2 and body["config"]["beam_size"] == 2
    assert 0 <= body["chrf"] <= 100
    assert (tmp_path / "report_examples.tsv").exists()


def test_finetune_defaults_and_output(trained, tmp_path):
    pairs = tmp_path / "pairs.tsv"
    pairs.write_text("ab\tba\nba\tab\n", encoding="utf-8")
    ck = str(trained / "ck" / "step_00000004")
    assert run(["finetune", "--ckpt", ck, "--train", str(pairs), "--out", str(tmp_path / "ft"),
                "--set", "epochs=1"]) == 0
    snap = (tmp_path / "ft" / "resolved_config.txt").read_text().splitlines()
    assert "learning_rate=0.0001" in snap and "epochs=1" in snap
    assert (tmp_path / "ft" / "finetune_epoch_001").is_dir()


def test_checkpoint_dir_from_environment(trained, tmp_path, monkeypatch):
    monkeypatch.setenv("SEGLM_CHECKPOINT_DIR", str(tmp_path / "env"))
    assert run(["pretrain", "--corpus", str(trained / "corpus.txt"), *TINY, "--set", "epochs=1"]) == 0
    assert (tmp_path / "env" / "step_00000002").is_dir()


def test_exit_codes(tmp_path, capsys):
    assert run([]) == 1
    assert run(["bogus"]) == 1
    assert run(["segment", "--ckpt", "x", "--in", "y", "--out", "z", "--set", "nonsense=1"]) == 1
    assert run(["segment", "--ckpt", str(tmp_path), "--in", "y", "--out", str(tmp_path / "o")]) == 2
    assert run(["--help"]) == 0
    assert "segment" in capsys.readouterr().out


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nbeam_size=3\nlearning_rate=0.01\n", encoding="utf-8")
    s = resolve_settings(str(cfg), ["beam_size=7"])
    assert s["beam_size"] == 7 and s["learning_rate"] == 0.01
    assert s["layers"] == DEFAULTS["layers"]


@pytest.mark.skipif(shutil.which("seglm") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["seglm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "analyze" in proc.stdout
