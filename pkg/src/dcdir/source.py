"""Source-domain features: skip-gram word vectors, item vectors, user GRU."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tape, Var
from .target import GruCell, gru_step, run_gru

UNK = "<unk>"


class ColdSourceError(ValueError):
    """User has no source-domain history."""


@dataclass
class WordConfig:
    dim: int = 50
    window: int = 2
    negatives: int = 5
    epochs: int = 20
    lr: float = 0.025
    min_lr: float = 1e-4
    batch_size: int = 64
    min_count: int = 1
    seed: int = 0


@dataclass
class WordTable:
    vocab: dict
    vectors: np.ndarray  # (len(vocab), d); the last row is the UNK vector
    config: WordConfig = field(default_factory=WordConfig)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, token: str) -> int:
        return self.vocab.get(token, self.vocab[UNK])

    def vector(self, token: str) -> np.ndarray:
        return self.vectors[self.index(token)]


def _tokenize(corpus):
    return [doc.split() if isinstance(doc, str) else list(doc) for doc in corpus]


def _skipgram_pairs(sentences, window):
    centers, contexts = [], []
    for s in sentences:
        n = len(s)
        for i in range(n):
            for j in range(max(0, i - window), min(n, i + window + 1)):
                if j != i:
                    centers.append(s[i])
                    contexts.append(s[j])
    return np.array(centers, dtype=np.int64), np.array(contexts, dtype=np.int64)


def _log_sigmoid_grad(z):
    # d/dz log sigmoid(z) = 1 - sigmoid(z)
    return 1.0 - ad._sigmoid(z)


def train_word_vectors(corpus, cfg: WordConfig | None = None) -> WordTable:
    """Skip-gram with negative sampling from the unigram^0.75 distribution.

    Plain minibatch SGD with a linearly decaying rate; seeded. The UNK vector
    is the mean of the trained in-vocabulary vectors.
    """
    cfg = cfg or WordConfig()
    sentences = [s for s in _tokenize(corpus) if s]
    if not sentences:
        raise ConfigError("word vectors need a nonempty corpus")
    counts = {}
    for s in sentences:
        for tok in s:
            counts[tok] = counts.get(tok, 0) + 1
    words = sorted(t for t, c in counts.items() if c >= cfg.min_count and t != UNK)
    vocab = {w: i for i, w in enumerate(words)}
    vocab[UNK] = len(words)
    rng = np.random.default_rng(cfg.seed)
    d, V = cfg.dim, len(words)
    w_in = rng.uniform(-0.5 / d, 0.5 / d, size=(V, d))
    w_out = np.zeros((V, d))

    ids = [[vocab[t] for t in s if t in vocab and t != UNK] for s in sentences]
    centers, contexts = _skipgram_pairs(ids, cfg.window)
    freq = np.array([counts[w] for w in words], dtype=np.float64) ** 0.75
    noise = freq / freq.sum()
    total_steps = max(1, cfg.epochs * int(np.ceil(len(centers) / cfg.batch_size)))
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(centers))
        for start in range(0, len(order), cfg.batch_size):
            lr = cfg.lr - (cfg.lr - cfg.min_lr) * step / total_steps
            step += 1
            b = order[start:start + cfg.batch_size]
            c, o = centers[b], contexts[b]
            neg = rng.choice(V, size=(len(b), cfg.negatives), p=noise)
            vc = w_in[c]                                  # (B, d)
            targets = np.concatenate([o[:, None], neg], axis=1)  # (B, 1+k)
            vo = w_out[targets]                           # (B, 1+k, d)
            z = np.einsum("bd,bkd->bk", vc, vo)
            sign = np.ones_like(z)
            sign[:, 1:] = -1.0
            g = sign * _log_sigmoid_grad(sign * z)        # ascent direction on log-likelihood
            grad_in = np.einsum("bk,bkd->bd", g, vo)
            grad_out = g[..., None] * vc[:, None, :]
            np.add.at(w_in, c, lr * grad_in)
            np.add.at(w_out, targets, lr * grad_out)
    unk = w_in.mean(axis=0, keepdims=True)
    return WordTable(vocab, np.concatenate([w_in, unk]), cfg)


@dataclass
class SourceItemEmbedding:
    item: object
    vector: np.ndarray


def item_embedding(table: WordTable, tokens, item=None) -> SourceItemEmbedding:
    """Elementwise max over the description's word vectors (UNK alone if empty)."""
    toks = tokens.split() if isinstance(tokens, str) else list(tokens)
    rows = [table.index(t) for t in toks] or [table.vocab[UNK]]
    return SourceItemEmbedding(item, table.vectors[rows].max(axis=0))


def item_matrix(table: WordTable, descriptions: list) -> np.ndarray:
    return np.stack([item_embedding(table, d).vector for d in descriptions])


@dataclass
class SourceUserFeature:
    u_s: np.ndarray


def encode_histories_on_tape(tape: Tape, cell: GruCell, item_vectors: np.ndarray, histories) -> Var:
    """GRU over each user's chronological item vectors -> ``(B, d)``.

    Histories of unequal length are right-aligned and left-padded; padded
    steps leave the hidden state untouched, so every row equals an unpadded
    run from ``h_0 = 0``.
    """
    if any(len(h) == 0 for h in histories):
        raise ColdSourceError("empty source history")
    B, T = len(histories), max(len(h) for h in histories)
    d = item_vectors.shape[1]
    w = cell.bind(tape)
    h = tape.const(np.zeros((B, d)))
    for step in range(T):
        rows = np.zeros((B, d))
        live = np.zeros((B, 1))
        for b, hist in enumerate(histories):
            k = step - (T - len(hist))
            if k >= 0:
                rows[b] = item_vectors[hist[k]]
                live[b] = 1.0
        new = gru_step(w, tape.const(rows), h)
        if live.all():
            h = new
        else:
            keep = tape.const(live)
            h = ad.add(ad.mul(keep, new), ad.mul(tape.const(1.0 - live), h))
    return h


def user_source_feature(cell: GruCell, history, item_vectors) -> SourceUserFeature:
    """``history`` indexes rows of ``item_vectors`` in chronological order."""
    if len(history) == 0:
        raise ColdSourceError("user has no source-domain history")
    tape = Tape(record=False)
    vectors = np.asarray(item_vectors)
    steps = [tape.const(vectors[i]) for i in history]
    return SourceUserFeature(run_gru(cell, steps).value)
