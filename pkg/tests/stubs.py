"""Hand-set scorers used as test fixtures."""

import math
from types import SimpleNamespace

import numpy as np
import torch

from seglm.corpus import Document
from seglm.model import NEG_INF, SegmentBatch, segment_tables


class ConstantScorer:
    """Gives every legal segment the same probability (not normalised)."""

    def __init__(self, prob=0.1, max_segment_len=3, max_seq_len=64):
        self.logp = math.log(prob)
        self.max_segment_len = max_segment_len
        self.config = SimpleNamespace(max_seq_len=max_seq_len)

    def prepare_batch(self, docs):
        L = self.max_segment_len
        n = max(len(d) for d in docs)
        valid = np.zeros((len(docs), n, L), dtype=bool)
        for b, d in enumerate(docs):
            valid[b, : len(d)] = segment_tables(d, _NoLexicon(), L)[0]
        lengths = torch.tensor([len(d) for d in docs])
        return SegmentBatch(None, lengths, torch.as_tensor(valid), None)

    def segment_scores(self, batch):
        v = batch.valid
        return torch.where(v, torch.full(v.shape, self.logp, dtype=torch.float64),
                           torch.full(v.shape, NEG_INF, dtype=torch.float64))

    def encode(self, doc):
        return doc

    def segment_log_prob(self, enc, start, end):
        return torch.tensor(self.logp, dtype=torch.float64)


class _NoLexicon:
    def get(self, s, default=-1):
        return default


class ToyDecoder:
    """Generator with hand-set heads over a tiny alphabet.

    The backbone state is the text read so far. Head outputs are fixed
    pseudo-random distributions keyed on (seed, state, in-segment prefix), so
    the model is deterministic and every probability can be recomputed
    independently. ``script`` maps (state, prefix) to a symbol the character
    head emits with probability 1 (``"<eos>"`` ends the segment); scripted
    models put all mixture weight on the character head.
    """

    def __init__(self, alphabet="ab", max_segment_len=2, seed=0, lexicon=("a", "ab", "ba"),
                 max_seq_len=64, script=None):
        from seglm.corpus import CharVocab, SubwordLexicon

        self.vocab = CharVocab(alphabet)
        self.lexicon = SubwordLexicon(
            [w for w in lexicon if set(w) <= set(alphabet) and len(w) <= max_segment_len],
            max_segment_len,
        )
        self.max_segment_len = max_segment_len
        self.config = SimpleNamespace(max_seq_len=max_seq_len)
        self.seed = seed
        self.script = script
        self.training = False
        # the char head may end a segment or emit any real character or EOT
        self.support = [self.vocab.eos_id] + self.vocab.emittable_ids()

    def eval(self):
        self.training = False
        return self

    def train(self, mode=True):
        self.training = mode
        return self

    def _rng(self, *key):
        import zlib

        return np.random.default_rng(zlib.crc32(repr((self.seed,) + key).encode()))

    def context_state(self, text):
        return text

    def char_probs(self, state, prefix):
        """Probability vector over the full character vocabulary."""
        p = np.zeros(len(self.vocab))
        if self.script is not None:
            sym = self.script.get((state, "".join(self.vocab.char(i) for i in prefix)))
            if sym is not None:
                p[self.vocab.eos_id if sym == "<eos>" else self.vocab.id_of[sym]] = 1.0
            return p
        p[self.support] = self._rng("char", state, tuple(prefix)).dirichlet(np.ones(len(self.support)))
        return p

    def phi(self, state):
        if self.script is not None:
            return 1.0
        return float(self._rng("phi", state).uniform(0.1, 0.9))

    def lex_probs(self, state):
        return self._rng("lex", state).dirichlet(np.ones(len(self.lexicon)))

    def char_step_log_probs(self, h, prefix):
        with np.errstate(divide="ignore"):
            return torch.as_tensor(np.log(self.char_probs(h, list(prefix))))

    def mixture_log_weights(self, h):
        phi = self.phi(h)
        with np.errstate(divide="ignore"):
            return torch.tensor(np.log(phi)), torch.tensor(np.log(1.0 - phi))

    def lexicon_log_probs(self, h):
        return torch.as_tensor(np.log(self.lex_probs(h)))

    def segment_prob(self, before, seg):
        """Mixture probability of ``seg`` opening after ``before``, in plain
        probability space."""
        ids = [self.vocab.id_of[c] for c in seg]
        p_char = 1.0
        for m, c in enumerate(ids):
            p_char *= self.char_probs(before, ids[:m])[c]
        p_char *= self.char_probs(before, ids)[self.vocab.eos_id]
        lex = self.lexicon.get(seg)
        p_lex = self.lex_probs(before)[lex] if lex >= 0 else 0.0
        phi = self.phi(before)
        return phi * p_char + (1.0 - phi) * p_lex


def compositions(text, L):
    """All ways to cut ``text`` into pieces of length 1..L."""
    if not text:
        yield []
        return
    for l in range(1, min(L, len(text)) + 1):
        for rest in compositions(text[l:], L):
            yield [text[:l]] + rest


def exhaustive_decode(toy, prompt, max_new_chars):
    """Best (score, text, segments, ended) over every character/boundary path.

    Paths either end with end-of-text or stop at ``max_new_chars``. Only
    whitespace-free alphabets are supported.
    """
    import itertools

    from seglm.corpus import END_OF_TEXT

    alphabet = [c for c in toy.vocab.itos[4:]]
    best = None
    n_paths = 0
    for k in range(max_new_chars + 1):
        for chars in itertools.product(alphabet, repeat=k):
            text = "".join(chars)
            for segs in compositions(text, toy.max_segment_len):
                logp, pos = 0.0, 0
                for s in segs:
                    logp += math.log(max(toy.segment_prob(prompt + text[:pos], s), 1e-300))
                    pos += len(s)
                endings = [(True, math.log(max(toy.segment_prob(prompt + text, END_OF_TEXT), 1e-300)))]
                if k == max_new_chars:
                    endings.append((False, 0.0))
                for ended, extra in endings:
                    n_paths += 1
                    cand = (logp + extra, text, segs, ended)
                    if best is None or cand[0] > best[0]:
                        best = cand
    return best, n_paths


def tiny_model(texts=("abc ab ca",), max_segment_len=3, seed=0, layers=1, heads=2,
               embed_dim=8, max_seq_len=32, lexicon_size=8, dtype=torch.float64,
               extra_chars=""):
    """Randomly initialised float64 model in eval mode."""
    from seglm.corpus import CharVocab, build_lexicon
    from seglm.model import ModelConfig, SegmentalModel

    docs = [Document.from_text(t) for t in texts]
    vocab = CharVocab.from_texts([*texts, extra_chars])
    lexicon = build_lexicon(docs, lexicon_size, max_segment_len)
    config = ModelConfig(layers=layers, heads=heads, embed_dim=embed_dim, max_seq_len=max_seq_len,
                         lexicon_size=len(lexicon), max_segment_len=max_segment_len, dropout=0.0)
    torch.manual_seed(seed)
    model = SegmentalModel(config, vocab, lexicon).to(dtype)
    # spread the weights so heads are far from uniform
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    return model.eval()
