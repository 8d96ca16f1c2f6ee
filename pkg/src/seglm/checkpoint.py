"""Checkpoint directories.

A checkpoint is a directory holding::

    config.txt    model config, one key=value per line
    params.bin    parameters (layout below)
    lexicon.txt   one lexicon entry per line, line order = id order
    vocab.txt     one character per line, specials first
    meta.txt      optional key=value metadata (step, epoch, loss)

``params.bin`` layout, all integers little-endian::

    magic      8 bytes  b"SEGLMPRM"
    version    u32      1
    count      u32      number of tensors
    then per tensor, in ``state_dict`` order:
      name_len u16, name (UTF-8)
      dtype    u8       0 = float32, 1 = float64, 2 = int64
      ndim     u8
      shape    ndim x u64
      data     row-major, little-endian
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .corpus import CharVocab, SubwordLexicon
from .model import ModelConfig, SegmentalModel

MAGIC = b"SEGLMPRM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}


class CheckpointError(IOError):
    pass


def write_params(state: dict[str, torch.Tensor], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name, tensor in state.items():
            t = tensor.detach().cpu().contiguous()
            if t.dtype not in _CODES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            code = _CODES[t.dtype]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, t.dim()))
            fh.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            fh.write(t.numpy().astype(_DTYPES[code], copy=False).tobytes(order="C"))


def read_params(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=off)
        off += size
        state[name] = torch.from_numpy(arr.reshape(shape).copy())
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return state


def _write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in items.items()), encoding="utf-8")


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def save_checkpoint(model: SegmentalModel, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text(model.config.to_text(), encoding="utf-8")
    write_params(model.state_dict(), path / "params.bin")
    model.lexicon.save(path / "lexicon.txt")
    model.vocab.save(path / "vocab.txt")
    if meta:
        _write_kv(path / "meta.txt", meta)
    return path


def load_checkpoint(path: str | Path) -> SegmentalModel:
    """Rebuild a model in evaluation mode, in the dtype it was saved with."""
    path = Path(path)
    if not (path / "params.bin").is_file():
        raise CheckpointError(f"{path}: not a checkpoint directory")
    config = ModelConfig.from_text((path / "config.txt").read_text(encoding="utf-8"))
    vocab = CharVocab.load(path / "vocab.txt")
    lexicon = SubwordLexicon.load(path / "lexicon.txt", config.max_segment_len)
    state = read_params(path / "params.bin")
    model = SegmentalModel(config, vocab, lexicon)
    dtypes = {t.dtype for t in state.values() if t.is_floating_point()}
    if dtypes == {torch.float64}:
        model = model.double()
    model.load_state_dict(state)
    return model.eval()


def read_meta(path: str | Path) -> dict[str, str]:
    meta = Path(path) / "meta.txt"
    return read_kv(meta) if meta.is_file() else {}
