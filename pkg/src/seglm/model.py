"""Character-level Transformer backbone with a lexicon/character segment mixture."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import CharVocab, Document, SubwordLexicon

# Stand-in for log(0) inside the lattice; keeps log-sum-exp free of NaNs.
NEG_INF = -1e9

_TABLE_CACHE_SIZE = 200_000


@dataclass
class ModelConfig:
    layers: int = 6
    heads: int = 8
    embed_dim: int = 512
    max_seq_len: int = 512
    lexicon_size: int = 10000
    max_segment_len: int = 5
    dropout: float = 0.1
    vocab_size: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.max_segment_len < 1 or self.lexicon_size < 1:
            raise ValueError("max_segment_len and lexicon_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise KeyError(f"unknown model config key {key!r}")
            kwargs[key] = float(value) if types[key] in (float, "float") else int(value)
        return cls(**kwargs)


class ContextEncoding(NamedTuple):
    """Backbone states for one document.

    ``hidden[j]`` summarises the first ``j`` characters; ``hidden[0]`` is the
    sequence-start state.
    """

    doc: Document
    ids: torch.Tensor
    hidden: torch.Tensor


class SegmentBatch(NamedTuple):
    ids: torch.Tensor  # (B, n) character ids, padded
    lengths: torch.Tensor  # (B,)
    valid: torch.Tensor  # (B, n, L) segment at start j of length l+1 allowed
    lex_ids: torch.Tensor  # (B, n, L) lexicon id of that segment, -1 if absent


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.dropout = cfg.dropout

    def forward(self, x):
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=2)
        q, k, v = (t.view(B, T, self.heads, C // self.heads).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(
            q, k, v, is_causal=True, dropout_p=self.dropout if self.training else 0.0
        )
        return self.proj(y.transpose(1, 2).reshape(B, T, C))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.mlp(self.ln2(x)))


class SegmentalModel(nn.Module):
    """Scores candidate segments ``c[j:k]`` given the characters before ``j``.

    p(segment | h) = phi * p_char(segment | h) + (1 - phi) * p_lex(segment | h),
    where h is the backbone state just before the segment, p_lex is a softmax
    over the lexicon, and p_char spells the segment character by character and
    then emits end-of-segment. All three heads read the same h.
    """

    def __init__(self, config: ModelConfig, vocab: CharVocab, lexicon: SubwordLexicon):
        super().__init__()
        if config.vocab_size not in (0, len(vocab)):
            raise ValueError("config.vocab_size does not match the character vocabulary")
        if config.lexicon_size != len(lexicon):
            raise ValueError("config.lexicon_size does not match the lexicon")
        if lexicon.max_len > config.max_segment_len:
            raise ValueError("lexicon entries longer than max_segment_len")
        config.vocab_size = len(vocab)
        self.config = config
        self.vocab = vocab
        self.lexicon = lexicon
        d, L, Vc = config.embed_dim, config.max_segment_len, len(vocab)

        self.tok_emb = nn.Embedding(Vc, d)
        self.pos_emb = nn.Embedding(config.max_seq_len + 1, d)
        self.drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(d)

        self.lex_head = nn.Linear(d, len(lexicon))
        self.mix_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 1))
        # in-segment speller: step m sees h plus position-tagged embeddings of
        # the m characters already spelled
        self.seg_char_emb = nn.Parameter(torch.empty(L, Vc, d))
        self.seg_step_emb = nn.Parameter(torch.empty(L + 1, d))
        self.char_ln = nn.LayerNorm(d)
        self.char_hidden = nn.Linear(d, d)
        self.char_out = nn.Linear(d, Vc)
        self.register_buffer("_char_mask", self._make_char_mask(Vc), persistent=False)
        self.reset_parameters()

    def _make_char_mask(self, Vc):
        mask = torch.zeros(Vc)
        mask[self.vocab.bos_id] = float("-inf")
        return mask

    def reset_parameters(self):
        for name, p in self.named_parameters():
            if p.dim() >= 2 or name.endswith("_emb"):
                nn.init.normal_(p, std=0.02)
            elif name.endswith("bias"):
                nn.init.zeros_(p)

    @property
    def max_segment_len(self) -> int:
        return self.config.max_segment_len

    # backbone -----------------------------------------------------------

    def hidden_states(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, n) ids -> (B, n+1, d) states, position 0 being the start state."""
        B, n = ids.shape
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len={self.config.max_seq_len}")
        bos = torch.full((B, 1), self.vocab.bos_id, dtype=ids.dtype, device=ids.device)
        x = torch.cat([bos, ids], dim=1)
        pos = torch.arange(n + 1, device=ids.device)
        h = self.drop(self.tok_emb(x) + self.pos_emb(pos))
        for block in self.blocks:
            h = block(h)
        return self.ln_f(h)

    def encode(self, doc: Document | str) -> ContextEncoding:
        if isinstance(doc, str):
            doc = Document.from_text(doc)
        ids = torch.as_tensor(self.vocab.encode(doc.text), device=self._device())
        return ContextEncoding(doc, ids, self.hidden_states(ids[None])[0])

    def context_state(self, text: str) -> torch.Tensor:
        """Backbone state after reading all of ``text``."""
        ids = torch.as_tensor(self.vocab.encode(text), device=self._device())
        return self.hidden_states(ids[None])[0, -1]

    def _device(self):
        return self.tok_emb.weight.device

    # heads ---------------------------------------------------------------

    def mixture_log_weights(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """log(phi) and log(1 - phi) for states ``h`` (..., d)."""
        z = self.mix_head(h).squeeze(-1)
        return F.logsigmoid(z), F.logsigmoid(-z)

    def lexicon_log_probs(self, h: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.lex_head(h), dim=-1)

    def _char_logits(self, u: torch.Tensor) -> torch.Tensor:
        return self.char_out(F.gelu(self.char_hidden(self.char_ln(u)))) + self._char_mask

    def char_step_log_probs(self, h: torch.Tensor, prefix: Sequence[int]) -> torch.Tensor:
        """Next-character distribution (incl. end-of-segment) after ``prefix``
        has been spelled inside a segment that started after state ``h``."""
        m = len(prefix)
        if m > self.max_segment_len:
            raise ValueError("segment prefix longer than max_segment_len")
        u = h + self.seg_step_emb[m]
        for i, c in enumerate(prefix):
            u = u + self.seg_char_emb[i, c]
        return F.log_softmax(self._char_logits(u), dim=-1)

    @staticmethod
    def mix(log_phi, log_1m_phi, char_lp, lex_lp):
        return torch.logaddexp(log_phi + char_lp, log_1m_phi + lex_lp)

    # per-segment scoring (reference path) ---------------------------------

    def segment_log_prob(self, enc: ContextEncoding, start: int, end: int) -> torch.Tensor:
        """log p(c[start:end] | c[:start]) for one segment (0-based, half-open)."""
        doc = enc.doc
        length = end - start
        if not (0 <= start < end <= len(doc)):
            raise ValueError(f"bad segment span [{start}, {end})")
        if length > self.max_segment_len:
            raise ValueError(f"segment length {length} exceeds max_segment_len")
        if doc.word_start[end - 1] > start:
            raise ValueError(f"segment [{start}, {end}) crosses a word boundary")
        h = enc.hidden[start]
        ids = [int(i) for i in enc.ids[start:end]]
        char_lp = h.new_zeros(())
        for m in range(length):
            char_lp = char_lp + self.char_step_log_probs(h, ids[:m])[ids[m]]
        char_lp = char_lp + self.char_step_log_probs(h, ids)[self.vocab.eos_id]
        lex_id = self.lexicon.get(doc.text[start:end])
        if lex_id >= 0:
            lex_lp = self.lexicon_log_probs(h)[lex_id]
        else:
            lex_lp = h.new_tensor(NEG_INF)
        log_phi, log_1m = self.mixture_log_weights(h)
        return self.mix(log_phi, log_1m, char_lp, lex_lp)

    # vectorised scoring ----------------------------------------------------

    def prepare_batch(self, docs: Sequence[Document]) -> SegmentBatch:
        L = self.max_segment_len
        B = len(docs)
        n = max(len(d) for d in docs)
        ids = np.full((B, n), self.vocab.eos_id, dtype=np.int64)
        valid = np.zeros((B, n, L), dtype=bool)
        lex_ids = np.full((B, n, L), -1, dtype=np.int64)
        lengths = np.zeros(B, dtype=np.int64)
        for b, doc in enumerate(docs):
            m = len(doc)
            lengths[b] = m
            ids[b, :m], valid[b, :m], lex_ids[b, :m] = self._tables(doc)
        dev = self._device()
        return SegmentBatch(
            torch.as_tensor(ids, device=dev),
            torch.as_tensor(lengths, device=dev),
            torch.as_tensor(valid, device=dev),
            torch.as_tensor(lex_ids, device=dev),
        )

    def _tables(self, doc: Document):
        cache = self.__dict__.setdefault("_table_cache", {})
        key = (doc.text, doc.word_start.tobytes())
        hit = cache.get(key)
        if hit is None:
            if len(cache) >= _TABLE_CACHE_SIZE:
                cache.clear()
            hit = (self.vocab.encode(doc.text),) + segment_tables(
                doc, self.lexicon, self.max_segment_len
            )
            cache[key] = hit
        return hit

    def segment_scores(self, batch: SegmentBatch) -> torch.Tensor:
        """(B, n, L) tensor: entry [b, j, l] is log p(c[j:j+l+1] | c[:j]),
        NEG_INF where that span is not a legal segment."""
        ids, _, valid, lex_ids = batch
        B, n = ids.shape
        L = self.max_segment_len
        H = self.hidden_states(ids)[:, :n]  # state before each start position

        # windows[b, j, i] = ids[b, j+i]
        padded = F.pad(ids, (0, L), value=self.vocab.eos_id)
        windows = padded.unfold(1, L, 1)[:, :n]
        steps = torch.arange(L, device=ids.device)
        tagged = self.seg_char_emb[steps, windows]  # (B, n, L, d)
        prefix = torch.cat([torch.zeros_like(tagged[:, :, :1]), tagged.cumsum(2)], dim=2)
        u = H[:, :, None, :] + self.seg_step_emb + prefix  # (B, n, L+1, d)
        logp = F.log_softmax(self._char_logits(u), dim=-1)
        tok_lp = logp[:, :, :L].gather(-1, windows[..., None]).squeeze(-1)
        eos_lp = logp[..., self.vocab.eos_id]
        char_lp = tok_lp.cumsum(-1) + eos_lp[:, :, 1:]

        lex_all = self.lexicon_log_probs(H)
        lex_lp = lex_all.gather(-1, lex_ids.clamp(min=0))
        lex_lp = torch.where(lex_ids >= 0, lex_lp, torch.full_like(lex_lp, NEG_INF))

        log_phi, log_1m = self.mixture_log_weights(H)
        scores = self.mix(log_phi[..., None], log_1m[..., None], char_lp, lex_lp)
        return torch.where(valid, scores, torch.full_like(scores, NEG_INF))


def segment_tables(doc: Document, lexicon: SubwordLexicon, L: int):
    """Validity mask and lexicon ids for every (start, length) of ``doc``."""
    n = len(doc)
    valid = np.zeros((n, L), dtype=bool)
    lex = np.full((n, L), -1, dtype=np.int64)
    ws = doc.word_start
    text = doc.text
    for j in range(n):
        for l in range(min(L, n - j)):
            if ws[j + l] > j:
                break
            valid[j, l] = True
            lex[j, l] = lexicon.get(text[j : j + l + 1])
    return valid, lex


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
