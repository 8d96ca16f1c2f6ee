"""Command-line entry point.

Every subcommand takes ``--config FILE`` (flat ``key=value`` lines) and any
number of ``--set key=value`` overrides, which win over the file. Unknown
keys are rejected. Each run writes the resolved settings next to its
outputs; re-running with ``--config <snapshot>`` and the command line
recorded in its header reproduces the run.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from dataclasses import fields
from pathlib import Path

import torch

from .analysis import build_trajectory, load_gold, segment_texts
from .checkpoint import load_checkpoint, read_kv
from .corpus import CharVocab, SubwordLexicon, build_lexicon, load_corpus
from .decoding import DecodeConfig, dynamic_decode
from .metrics import evaluate, load_testset
from .model import ModelConfig, SegmentalModel
from .training import (
    PROMPT_MARKER,
    PromptExample,
    TrainConfig,
    finetune,
    pretrain,
    render_prompt,
)

logger = logging.getLogger("seglm")

CHECKPOINT_ENV = "SEGLM_CHECKPOINT_DIR"
SNAPSHOT_SUFFIX = ".config.txt"

_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "vocab_size"]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
DEFAULTS = {
    **{k: getattr(ModelConfig(), k) for k in _MODEL_KEYS},
    **{k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS},
    **{f.name: getattr(DecodeConfig(), f.name) for f in fields(DecodeConfig)},
    "max_repeats": 3,
    "max_word_len": 30,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _coerce(key: str, value: str):
    try:
        return type(DEFAULTS[key])(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def resolve_settings(config_path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the config file, then ``--set`` overrides."""
    raw: dict[str, str] = {}
    if config_path:
        try:
            raw.update(read_kv(config_path))
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    return {k: _coerce(k, raw[k]) if k in raw else v for k, v in DEFAULTS.items()}


def _explicit(config_path: str | None, overrides: list[str]) -> set[str]:
    keys = set(read_kv(config_path)) if config_path else set()
    keys.update(item.partition("=")[0].strip() for item in overrides)
    return keys


def write_snapshot(path: Path, settings: dict, argv: list[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# seglm {shlex.join(argv)}\n"]
    lines += [f"{k}={settings[k]}\n" for k in sorted(settings)]
    path.write_text("".join(lines), encoding="utf-8")
    return path


def _model_config(s: dict, lexicon_size: int) -> ModelConfig:
    kwargs = {k: s[k] for k in _MODEL_KEYS}
    kwargs["lexicon_size"] = lexicon_size
    return ModelConfig(**kwargs)


def _train_config(s: dict, out: Path, finetuning: bool, explicit: set[str]) -> TrainConfig:
    if finetuning:
        # finetuning defaults apply unless a key was set explicitly
        kwargs = {k: s[k] for k in _TRAIN_KEYS if k in explicit}
        kwargs["checkpoint_dir"] = str(out)
        kwargs.setdefault("seed", s["seed"])
        return TrainConfig.for_finetuning(**kwargs)
    kwargs = {k: s[k] for k in _TRAIN_KEYS}
    kwargs["checkpoint_dir"] = str(out)
    return TrainConfig(**kwargs)


def _read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\r\n") for line in fh]


def _write_lines(path: str | Path, lines) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{line}\n" for line in lines)


def _read_pairs(path: str) -> list[PromptExample]:
    return [PromptExample(p, r) for p, r in load_testset(path)]


# subcommands -----------------------------------------------------------


def cmd_build_lexicon(args, s, argv):
    docs, _ = load_corpus(args.corpus)
    vocab = CharVocab.from_texts([*(d.text for d in docs), PROMPT_MARKER])
    lexicon = build_lexicon(docs, s["lexicon_size"], s["max_segment_len"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lexicon.save(out / "lexicon.txt")
    vocab.save(out / "vocab.txt")
    write_snapshot(out / "resolved_config.txt", s, argv)
    logger.info("lexicon: %d entries, vocabulary: %d symbols -> %s", len(lexicon), len(vocab), out)


def cmd_pretrain(args, s, argv):
    out = Path(args.out)
    if args.lexicon:
        lex_dir = Path(args.lexicon)
        vocab = CharVocab.load(lex_dir / "vocab.txt")
        lexicon = SubwordLexicon.load(lex_dir / "lexicon.txt", s["max_segment_len"])
        docs, _ = load_corpus(args.corpus, vocab)
    else:
        docs, _ = load_corpus(args.corpus)
        vocab = CharVocab.from_texts([*(d.text for d in docs), PROMPT_MARKER])
        lexicon = build_lexicon(docs, s["lexicon_size"], s["max_segment_len"])
    s = dict(s, lexicon_size=len(lexicon))
    write_snapshot(out / "resolved_config.txt", s, argv)
    torch.manual_seed(s["seed"])
    model = SegmentalModel(_model_config(s, len(lexicon)), vocab, lexicon)
    for path in pretrain(model, docs, _train_config(s, out, False, set())):
        print(path)


def cmd_finetune(args, s, argv):
    out = Path(args.out)
    model = load_checkpoint(args.ckpt)
    train = _read_pairs(args.train)
    valid = _read_pairs(args.valid) if args.valid else None
    config = _train_config(s, out, True, _explicit(args.config, args.set))
    write_snapshot(out / "resolved_config.txt", dict(s, **{k: getattr(config, k) for k in _TRAIN_KEYS}), argv)
    print(finetune(model, train, config, valid))


def cmd_segment(args, s, argv):
    model = load_checkpoint(args.ckpt)
    texts = [t for t in _read_lines(args.input) if t.strip()]
    _write_lines(args.out, segment_texts(model, texts))
    write_snapshot(Path(args.out + SNAPSHOT_SUFFIX), s, argv)


def cmd_generate(args, s, argv):
    model = load_checkpoint(args.ckpt)
    config = DecodeConfig(beam_size=s["beam_size"], max_new_chars=s["max_new_chars"])
    texts, pipes = [], []
    for prompt in _read_lines(args.input):
        result = dynamic_decode(model, prompt if args.raw else render_prompt(prompt), config)
        if result.failed:
            logger.warning("no finished hypothesis for %r", prompt)
        texts.append(result.text.replace("\n", " "))
        pipes.append(result.to_pipe().replace("\n", " "))
    _write_lines(args.out, texts)
    if args.pipe_out:
        _write_lines(args.pipe_out, pipes)
    write_snapshot(Path(args.out + SNAPSHOT_SUFFIX), s, argv)


def cmd_analyze(args, s, argv):
    items = [c for c in args.ckpts.split(",") if c]
    if not items:
        raise UsageError("--ckpts is empty")
    docs, _ = load_corpus(args.eval)
    gold = load_gold(args.gold) if args.gold else None
    report = build_trajectory(items, docs, gold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    hist = Path(args.hist_out) if args.hist_out else out.with_name(out.stem + "_hist.csv")
    report.write_histogram_csv(hist)
    write_snapshot(Path(str(out) + SNAPSHOT_SUFFIX), s, argv)
    if report.failed:
        logger.warning("%d checkpoint(s) failed: %s", len(report.failed), ", ".join(report.failed))


def cmd_evaluate(args, s, argv):
    model = load_checkpoint(args.ckpt)
    testset = load_testset(args.test)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    examples = Path(args.examples_out) if args.examples_out else out.with_name(out.stem + "_examples.tsv")
    config = DecodeConfig(beam_size=s["beam_size"], max_new_chars=s["max_new_chars"])
    report = evaluate(
        model, testset, config, examples, render=not args.raw,
        max_repeats=s["max_repeats"], max_word_len=s["max_word_len"],
    )
    echo = {"checkpoint": str(args.ckpt), "testset": str(args.test), **s}
    out.write_text(report.to_json(echo) + "\n", encoding="utf-8")
    write_snapshot(Path(str(out) + SNAPSHOT_SUFFIX), s, argv)
    print(json.dumps({"chrf": report.chrf, "bleu": report.bleu, "deg_pct": report.deg_pct}))


# parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seglm", description="Subword-segmental language modelling toolkit.")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting; repeatable")
        p.set_defaults(func=func)
        return p

    p = add("build-lexicon", cmd_build_lexicon, "Build the character vocabulary and subword lexicon.")
    p.add_argument("--corpus", required=True, help="training text, one document per line")
    p.add_argument("--out", required=True, help="output directory")

    p = add("pretrain", cmd_pretrain, "Pretrain on the marginal likelihood of a corpus.")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon", help="directory from build-lexicon (built on the fly if absent)")
    p.add_argument("--out", default=None, help=f"checkpoint directory (default ${CHECKPOINT_ENV} or ./checkpoints)")

    p = add("finetune", cmd_finetune, "Finetune a checkpoint on prompt<TAB>completion pairs.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--out", default=None, help=f"output directory (default ${CHECKPOINT_ENV}/finetune)")

    p = add("segment", cmd_segment, "Write Viterbi segmentations in pipe format.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("generate", cmd_generate, "Generate a completion for each prompt line.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pipe-out", help="also write completions in pipe format")
    p.add_argument("--raw", action="store_true", help="use prompts as-is, without the prompt marker")

    p = add("analyze", cmd_analyze, "Segmentation metrics for a series of checkpoints.")
    p.add_argument("--ckpts", required=True, help="comma-separated checkpoint dirs or pipe-format files")
    p.add_argument("--eval", required=True, help="evaluation text, one document per line")
    p.add_argument("--gold", help="gold morphology TSV: word<TAB>m1|m2|...")
    p.add_argument("--out", required=True, help="trajectory CSV")
    p.add_argument("--hist-out", help="fertility histogram CSV (default <out>_hist.csv)")

    p = add("evaluate", cmd_evaluate, "chrF, BLEU and degeneration rate on a prompt<TAB>reference test set.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--examples-out", help="per-example TSV (default <out>_examples.tsv)")
    p.add_argument("--raw", action="store_true", help="use prompts as-is, without the prompt marker")
    return parser


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "seglm: error: no command given")
        logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        settings = resolve_settings(args.config, args.set)
        if args.command in ("pretrain", "finetune"):
            if args.out is None:
                if "checkpoint_dir" in _explicit(args.config, args.set):
                    base = Path(settings["checkpoint_dir"])
                else:
                    base = Path(os.environ.get(CHECKPOINT_ENV, "checkpoints"))
                args.out = str(base / "finetune" if args.command == "finetune" else base)
            settings["checkpoint_dir"] = args.out
        args.func(args, settings, argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        logger.debug("traceback", exc_info=True)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
