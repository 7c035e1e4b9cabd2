"""Joint training, cold-start ranking, evaluation and sparsity sweeps."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Parameter, Tape
from .mapper import MlpMapper, cross_loss_on_tape
from .paths import PathIndex, recency_terms, similarity_terms, top_k_order
from .source import ColdSourceError, WordConfig, WordTable, encode_histories_on_tape, item_matrix, train_word_vectors
from .synth import Dataset, Splits, split
from .target import GruCell, ItemAggregator, NoPathFallback, encode_paths_on_tape
from .transd import TransDConfig, TransDTable, pretrain

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
VARIANTS = ("full", "v1", "v2")
STRATEGIES = ("topk", "random")


@dataclass
class TrainConfig:
    dim: int = 50
    lr: float = 0.001
    batch_size: int = 32
    keep_prob: float = 0.8
    k: int = 20
    path_strategy: str = "topk"
    negatives_per_positive: int = 4
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    eta: float = 1.0
    variant: str = "full"
    eval_negatives: int = 9
    cold_start_fraction: float = 0.30
    freeze_kg: bool = False
    max_paths: int = 10_000
    kg_epochs: int = 200
    kg_lr: float = 0.01
    word_epochs: int = 20
    track_objective: bool = False  # no-dropout loss on fixed negatives, before training and per epoch

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("dim", "lr", "batch_size", "k", "negatives_per_positive", "eval_negatives", "max_paths"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError(f"eta must be in (0, 1], got {self.eta}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.path_strategy not in STRATEGIES:
            raise ConfigError(f"path_strategy must be one of {STRATEGIES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    cross: float
    target: float
    source: float
    total: float


@dataclass
class MetricsReport:
    ndcg: float
    recall_at_3: float
    n_users: int
    eta: float | None = None
    ranks: list = field(default_factory=list, repr=False)

    def row(self) -> str:
        return f"{self.eta}\t{self.ndcg!r}\t{self.recall_at_3!r}\t{self.n_users}"


# ---------------------------------------------------------------- model state


class ModelState:
    """Every trainable piece plus the frozen word table and config snapshot."""

    def __init__(self, cfg: TrainConfig, table: TransDTable, words: WordTable, rng: np.random.Generator):
        self.config = cfg
        self.table = table
        self.words = words
        self.target_cell = GruCell(cfg.dim, rng, prefix="target_gru")
        self.source_cell = GruCell(cfg.dim, rng, prefix="source_gru")
        self.mapper = MlpMapper(cfg.dim, rng)
        self.fallback = NoPathFallback(cfg.dim, rng)
        self.step = 0
        self.history: dict = {"steps": [], "epochs": [], "validation_ndcg": [], "objective": []}

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        kg = [] if (trainable_only and self.config.freeze_kg) else self.table.parameters()
        return (kg + self.target_cell.parameters() + self.source_cell.parameters()
                + self.mapper.parameters() + self.fallback.parameters())

    def snapshot(self) -> dict:
        return {p.name: (p.value.copy(), p.adam_m.copy(), p.adam_v.copy(), p.step_count)
                for p in self.parameters(trainable_only=False)}

    def restore(self, snap: dict):
        for p in self.parameters(trainable_only=False):
            v, m, s, n = snap[p.name]
            p.value[...] = v
            p.adam_m[...] = m
            p.adam_v[...] = s
            p.step_count = n


class Encoded:
    """Integer views of a dataset for fast batching."""

    def __init__(self, ds: Dataset, words: WordTable):
        self.ds = ds
        self.kg = ds.kg
        self.products = np.array(ds.kg.products, dtype=np.int64)
        self.source_ids = ds.source_items
        self.source_index = {s: i for i, s in enumerate(self.source_ids)}
        self.item_vectors = item_matrix(words, [ds.descriptions[s] for s in self.source_ids])
        self.user_index = {u: i for i, u in enumerate(ds.users)}
        self._ent = {}
        self._src = {}

    def target_ids(self, user) -> list[int]:
        if user not in self._ent:
            self._ent[user] = [self.kg.entity(k) for k in self.ds.target.get(user, [])]
        return self._ent[user]

    def source_history(self, user) -> list[int]:
        if user not in self._src:
            self._src[user] = [self.source_index[s] for s in self.ds.source.get(user, [])]
        return self._src[user]


# ---------------------------------------------------------------- losses


def recommendation_loss(predictions, tape: Tape | None = None):
    """Summed binary cross-entropy over ``(y_hat, y)`` pairs; ``y_hat`` clamped to [1e-12, 1 - 1e-12]."""
    if tape is not None:
        p, y = predictions
        return ad.binary_cross_entropy(p, y)
    preds = list(predictions)
    if not preds:
        return 0.0
    t = Tape(record=False)
    p = t.const([q for q, _ in preds])
    return float(ad.binary_cross_entropy(p, [y for _, y in preds]).value)


# ---------------------------------------------------------------- path selection


def select_paths(index: PathIndex, entity_vectors: np.ndarray, history, target: int, cfg: TrainConfig,
                 rng: np.random.Generator, candidates=None) -> np.ndarray:
    """Entity matrix of the paths used for one (history, target) pair."""
    if candidates is None:
        candidates = index.candidates(history, target, cap=cfg.max_paths)
    ents, pos, _ = candidates
    if len(ents) <= cfg.k:
        return ents
    if cfg.path_strategy == "random":
        return ents[np.sort(rng.choice(len(ents), size=cfg.k, replace=False))]
    scores = recency_terms(pos, len(history)) + similarity_terms(ents, entity_vectors)
    return ents[top_k_order(scores, ents, cfg.k)]


# ---------------------------------------------------------------- forward passes


class Forward:
    """Builds the target/source user features of a batch on a tape."""

    def __init__(self, state: ModelState, enc: Encoded, index: PathIndex):
        self.state = state
        self.enc = enc
        self.index = index
        cfg = state.config
        self.aggregator = ItemAggregator(enc.kg, cfg.variant) if cfg.variant != "full" else None
        self._candidates = {}

    def candidates(self, user, history, target):
        key = (user, target)
        if key not in self._candidates:
            self._candidates[key] = self.index.candidates(history, target, cap=self.state.config.max_paths)
        return self._candidates[key]

    def entity_table(self, tape: Tape):
        p = self.state.table.entity
        return tape.const(p.value) if self.state.config.freeze_kg or not tape.record else tape.param(p)

    def target_features(self, tape: Tape, E, pairs, histories, rng) -> ad.Var:
        """``pairs``: list of (user, target entity); ``histories``: user -> entity list."""
        st, cfg = self.state, self.state.config
        fb = st.fallback
        if cfg.variant == "full":
            vectors = st.table.entity.value
            groups = [select_paths(self.index, vectors, histories[u], v, cfg, rng,
                                   self.candidates(u, histories[u], v)) for u, v in pairs]
            sizes = [len(g) for g in groups]
            nonempty = [i for i, n in enumerate(sizes) if n]
            rows = encode_paths_on_tape(st.target_cell, E, np.concatenate([groups[i] for i in nonempty])) \
                if nonempty else None
        else:
            members = [sorted(set(histories[u]) - {v}) for u, v in pairs]
            sizes = [len(m) for m in members]
            nonempty = [i for i, n in enumerate(sizes) if n]
            rows = self.aggregator.on_tape(E, [it for i in nonempty for it in members[i]]) if nonempty else None
        parts = []
        if nonempty:
            seg = np.repeat(np.arange(len(nonempty)), [sizes[i] for i in nonempty])
            parts.append(ad.segment_max(rows, seg, len(nonempty)))
        parts.append(tape.param(fb.vector) if tape.record else tape.const(fb.vector.value))
        slot = {i: k for k, i in enumerate(nonempty)}
        return ad.gather(ad.concat_rows(parts), [slot.get(i, len(nonempty)) for i in range(len(pairs))])

    def source_features(self, tape: Tape, users) -> ad.Var:
        hist = [self.enc.source_history(u) for u in users]
        return encode_histories_on_tape(tape, self.state.source_cell, self.enc.item_vectors, hist)


def _sample_excluding(rng, pool_size: int, exclude: set, n: int) -> list[int]:
    out = []
    while len(out) < n:
        c = int(rng.integers(pool_size))
        if c not in exclude:
            out.append(c)
    return out


def batch_losses(fwd: Forward, batch, train_hist: dict, rng: np.random.Generator, training: bool = True):
    """``(tape, L_cross, L_T, L_S, total)`` for a batch of (user, item) positives.

    With ``training=False`` nothing is recorded and dropout is off.
    """
    st, enc, cfg = fwd.state, fwd.enc, fwd.state.config
    n_prod = len(enc.products)
    prod_pos = {int(p): i for i, p in enumerate(enc.products)}
    pairs, labels = [], []
    src_items, src_labels = [], []
    for u, v in batch:
        interacted = {prod_pos[e] for e in enc.target_ids(u)}
        pairs.append((u, v))
        labels.append(1.0)
        for j in _sample_excluding(rng, n_prod, interacted, cfg.negatives_per_positive):
            pairs.append((u, int(enc.products[j])))
            labels.append(0.0)
        shist = enc.source_history(u)
        src_items.append(shist[int(rng.integers(len(shist)))])
        src_labels.append(1.0)
        src_items.extend(_sample_excluding(rng, len(enc.source_ids), set(shist), cfg.negatives_per_positive))
        src_labels.extend([0.0] * cfg.negatives_per_positive)

    tape = Tape(record=training)
    E = fwd.entity_table(tape)
    u_t = fwd.target_features(tape, E, pairs, train_hist, rng)
    u_t_drop = ad.dropout(u_t, cfg.keep_prob, rng, training)
    v_t = ad.gather(E, [v for _, v in pairs])
    loss_t = ad.binary_cross_entropy(ad.sigmoid(ad.rowdot(u_t_drop, v_t)), labels)

    users = list(dict.fromkeys(u for u, _ in batch))
    row_of = {u: i for i, u in enumerate(users)}
    u_s = fwd.source_features(tape, users)
    u_s_drop = ad.dropout(u_s, cfg.keep_prob, rng, training)
    group = 1 + cfg.negatives_per_positive
    src_rows = ad.gather(u_s_drop, np.repeat([row_of[u] for u, _ in batch], group))
    item_vecs = tape.const(enc.item_vectors[src_items])
    loss_s = ad.binary_cross_entropy(ad.sigmoid(ad.rowdot(src_rows, item_vecs)), src_labels)

    pos_rows = np.arange(len(batch)) * group
    loss_c = cross_loss_on_tape(tape, st.mapper, u_s.value[[row_of[u] for u, _ in batch]], u_t.value[pos_rows],
                                keep_prob=cfg.keep_prob, rng=rng, training=training)
    total = ad.add(ad.add(loss_c, loss_t), loss_s)
    return tape, loss_c, loss_t, loss_s, total


def _breakdown(parts) -> LossBreakdown:
    return LossBreakdown(*(float(v.value) for v in parts))


def train_step(fwd: Forward, batch, train_hist: dict, rng: np.random.Generator) -> LossBreakdown:
    """One Adam step on ``L_cross + L_T + L_S``."""
    st, cfg = fwd.state, fwd.state.config
    tape, *parts = batch_losses(fwd, batch, train_hist, rng, training=True)
    total = parts[-1]
    tape.backward(total)
    ad.adam_step(st.parameters(), lr=cfg.lr)
    st.step += 1
    return _breakdown(parts)


def objective(fwd: Forward, pairs, train_hist: dict, seed: int) -> LossBreakdown:
    """Mean per-batch loss over ``pairs`` without updates or dropout.

    Negatives come from ``seed``, so calls before and after training compare
    the same sampled objective.
    """
    rng = np.random.default_rng([seed, 31])
    bs = fwd.state.config.batch_size
    parts = [_breakdown(batch_losses(fwd, pairs[i:i + bs], train_hist, rng, training=False)[1:])
             for i in range(0, len(pairs), bs)]
    return LossBreakdown(*(float(np.mean([getattr(p, f) for p in parts]))
                           for f in ("cross", "target", "source", "total")))


# ---------------------------------------------------------------- cold-start ranking


def mapped_features(state: ModelState, enc: Encoded, users) -> np.ndarray:
    """``f_mlp(u^s)`` for each user, inference mode."""
    if not users:
        return np.zeros((0, state.config.dim))
    tape = Tape(record=False)
    u_s = encode_histories_on_tape(tape, state.source_cell, enc.item_vectors,
                                   [enc.source_history(u) for u in users])
    return state.mapper.on_tape(u_s).value


def cold_start_rank(state: ModelState, source_history, candidates, words: WordTable | None = None,
                    descriptions: dict | None = None, item_vectors=None):
    """Rank candidate products for a user known only by source history.

    ``source_history`` is a list of row indices into ``item_vectors`` (or of
    item ids when ``descriptions`` is given). ``candidates`` are entity ids.
    Returns ``[(entity id, score), ...]`` by score descending, id ascending.
    """
    if len(source_history) == 0:
        raise ColdSourceError("cold-start ranking needs a source history")
    if descriptions is not None:
        from .source import item_embedding
        w = words or state.words
        item_vectors = np.stack([item_embedding(w, descriptions[s]).vector for s in source_history])
        source_history = list(range(len(source_history)))
    tape = Tape(record=False)
    u_s = encode_histories_on_tape(tape, state.source_cell, np.asarray(item_vectors), [list(source_history)])
    u_hat = state.mapper.on_tape(u_s).value[0]
    cands = np.asarray(candidates, dtype=np.int64)
    logits = state.table.entity.value[cands] @ u_hat
    scores = ad._sigmoid(logits)
    order = np.lexsort([cands, -logits])  # logits: sigmoid saturation would create false ties
    return [(int(cands[i]), float(scores[i])) for i in order]


def random_expectation(n_candidates: int) -> float:
    """Expected NDCG of a uniformly random ranking of ``n`` candidates with one relevant item."""
    return float(np.mean([1.0 / math.log2(1 + r) for r in range(1, n_candidates + 1)]))


def eval_negatives(enc: Encoded, user, truth: int, n: int, seed: int) -> list[int]:
    """Seeded per (user, ground truth) sample of never-interacted products."""
    interacted = set(enc.target_ids(user)) | {truth}
    pool = [int(p) for p in enc.products if int(p) not in interacted]
    rng = np.random.default_rng([seed, enc.user_index[user], truth])
    k = min(n, len(pool))
    return sorted(int(x) for x in rng.choice(pool, size=k, replace=False)) if k else []


def rank_cases(score_fn, enc: Encoded, cases: dict, n_neg: int, seed: int, eta=None) -> MetricsReport:
    """Shared protocol: rank each ground truth among sampled negatives.

    ``score_fn(users)`` returns an ``(len(users), n_entities)`` score matrix.
    """
    users = sorted(cases)
    if not users:
        return MetricsReport(0.0, 0.0, 0, eta)
    scores = score_fn(users)
    ranks = []
    for row, u in enumerate(users):
        truth = enc.kg.entity(cases[u])
        cands = np.array([truth] + eval_negatives(enc, u, truth, n_neg, seed), dtype=np.int64)
        s = scores[row, cands]
        order = np.lexsort([cands, -s])
        ranks.append(int(np.nonzero(cands[order] == truth)[0][0]) + 1)
    r = np.array(ranks, dtype=np.float64)
    ndcg = float(np.mean(1.0 / np.log2(1.0 + r)))
    recall = float(np.mean(r <= 3))
    return MetricsReport(ndcg, recall, len(users), eta, ranks)


def dcdir_scores(state: ModelState, enc: Encoded):
    """Logits ``u_hat . v``; ranking by them equals ranking by the sigmoid."""
    def score(users):
        return mapped_features(state, enc, users) @ state.table.entity.value.T
    return score


def popularity_scores(enc: Encoded, train_target: dict):
    counts = np.zeros(enc.kg.n_entities)
    for seq in train_target.values():
        for k in seq:
            counts[enc.kg.entity(k)] += 1

    def score(users):
        return np.tile(counts, (len(users), 1))
    return score


def evaluate(state: ModelState, ds: Dataset, cases: dict, cfg: TrainConfig | None = None,
             enc: Encoded | None = None, seed: int | None = None) -> MetricsReport:
    """Cold-start NDCG / Recall@3 over ``cases`` (user -> held-out product key)."""
    cfg = cfg or state.config
    enc = enc or Encoded(ds, state.words)
    seed = cfg.seed if seed is None else seed
    return rank_cases(dcdir_scores(state, enc), enc, cases, cfg.eval_negatives, seed, cfg.eta)


# ---------------------------------------------------------------- training


def prepare(ds: Dataset, cfg: TrainConfig, table: TransDTable | None = None,
            words: WordTable | None = None) -> ModelState:
    """Pretrain (or adopt) the KG table and word vectors and build a fresh model."""
    if table is None:
        table = pretrain(ds.kg, TransDConfig(dim=cfg.dim, epochs=cfg.kg_epochs, lr=cfg.kg_lr, seed=cfg.seed))
    else:
        table = table.copy()
    if table.dim != cfg.dim:
        raise ConfigError(f"KG table dim {table.dim} differs from model dim {cfg.dim}")
    if words is None:
        words = train_word_vectors([ds.descriptions[s] for s in ds.source_items],
                                   WordConfig(dim=cfg.dim, epochs=cfg.word_epochs, seed=cfg.seed))
    rng = np.random.default_rng([cfg.seed, 11])
    return ModelState(cfg, table, words, rng)


def training_pairs(enc: Encoded, sp: Splits) -> list[tuple]:
    return [(u, enc.kg.entity(k)) for u in sorted(sp.train_target) for k in sp.train_target[u]]


def train(ds: Dataset, cfg: TrainConfig, splits: Splits | None = None, table: TransDTable | None = None,
          words: WordTable | None = None, on_step=None) -> ModelState:
    """Joint training with per-epoch validation and best-checkpoint selection."""
    sp = splits or split(ds, cfg.cold_start_fraction, cfg.eta, cfg.seed)
    state = prepare(ds, cfg, table, words)
    enc = Encoded(ds, state.words)
    pairs = training_pairs(enc, sp)
    if not pairs:
        raise ConfigError("empty training split")
    index = PathIndex(ds.kg)
    fwd = Forward(state, enc, index)
    train_hist = {u: [enc.kg.entity(k) for k in seq] for u, seq in sp.train_target.items()}
    rng = np.random.default_rng([cfg.seed, 23])
    if cfg.track_objective:
        state.history["objective"].append(asdict(objective(fwd, pairs, train_hist, cfg.seed)))
    best, best_ndcg, stale = state.snapshot(), -1.0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        parts = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            lb = train_step(fwd, batch, train_hist, rng)
            state.history["steps"].append(asdict(lb))
            parts.append(lb)
            if on_step:
                on_step(state, lb)
        mean = LossBreakdown(*(float(np.mean([getattr(p, f) for p in parts]))
                               for f in ("cross", "target", "source", "total")))
        state.history["epochs"].append(asdict(mean))
        if cfg.track_objective:
            state.history["objective"].append(asdict(objective(fwd, pairs, train_hist, cfg.seed)))
        val = rank_cases(dcdir_scores(state, enc), enc, sp.validation, cfg.eval_negatives, cfg.seed + 1)
        state.history["validation_ndcg"].append(val.ndcg)
        log.info("epoch %d loss %.4f val ndcg %.4f", epoch + 1, mean.total, val.ndcg)
        if val.ndcg > best_ndcg:
            best, best_ndcg, stale = state.snapshot(), val.ndcg, 0
            state.history["best_epoch"] = epoch + 1
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if cfg.epochs:
        state.restore(best)
    return state


def sweep(ds: Dataset, cfg: TrainConfig, etas=(0.1, 0.2, 0.5, 1.0), table: TransDTable | None = None):
    """Train and test once per eta on nested training subsets and a fixed test set."""
    if table is None:
        table = pretrain(ds.kg, TransDConfig(dim=cfg.dim, epochs=cfg.kg_epochs, lr=cfg.kg_lr, seed=cfg.seed))
    rows = []
    for eta in etas:
        run_cfg = TrainConfig(**{**asdict(cfg), "eta": float(eta)})
        sp = split(ds, run_cfg.cold_start_fraction, run_cfg.eta, run_cfg.seed)
        state = train(ds, run_cfg, splits=sp, table=table)
        report = evaluate(state, ds, sp.test_truth, run_cfg)
        report.eta = float(eta)
        rows.append((report, sum(len(s) for s in sp.train_target.values())))
    return rows


# ---------------------------------------------------------------- persistence


def save_checkpoint(state: ModelState, directory, extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {}
    params = []
    for p in state.parameters(trainable_only=False):
        arrays[p.name] = p.value
        arrays[p.name + "#adam_m"] = p.adam_m
        arrays[p.name + "#adam_v"] = p.adam_v
        params.append({"name": p.name, "shape": list(p.value.shape), "step_count": p.step_count})
    arrays["words.vectors"] = state.words.vectors
    np.savez(d / "params.npz", **arrays)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "step": state.step,
        "parameters": params,
        "entity_keys": state.table.entity_keys,
        "relation_names": state.table.relation_names,
        "vocab": sorted(state.words.vocab, key=state.words.vocab.get),
        "word_config": asdict(state.words.config),
        "history": state.history,
    }
    if extra:
        manifest.update(extra)
    with open(d / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> ModelState:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    cfg = TrainConfig.from_dict(manifest["config"])
    with np.load(d / "params.npz") as z:
        arrays = {k: z[k] for k in z.files}
    vocab = {w: i for i, w in enumerate(manifest["vocab"])}
    words = WordTable(vocab, arrays["words.vectors"], WordConfig(**manifest["word_config"]))

    def param(name):
        return Parameter(name, arrays[name])

    table = TransDTable(manifest["entity_keys"], manifest["relation_names"], param("kg.entity"),
                        param("kg.entity_proj"), param("kg.relation"), param("kg.relation_proj"))
    state = ModelState(cfg, table, words, np.random.default_rng(0))
    steps = {p["name"]: p["step_count"] for p in manifest["parameters"]}
    for p in state.parameters(trainable_only=False):
        if p.name not in arrays:
            raise ValueError(f"checkpoint lacks parameter {p.name}")
        p.value[...] = arrays[p.name]
        p.adam_m[...] = arrays[p.name + "#adam_m"]
        p.adam_v[...] = arrays[p.name + "#adam_v"]
        p.step_count = steps[p.name]
    state.step = manifest["step"]
    state.history = manifest.get("history", state.history)
    return state
