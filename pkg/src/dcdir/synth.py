"""Synthetic two-domain datasets with a tunable cross-domain signal.

Every user has a latent target-domain preference cluster. Clusters own Needs
and Features in the graph and the Products linked to them, so target-domain
purchases concentrate on products that share Needs. With probability
``cross_domain_signal`` the user's source-domain cluster equals the target
cluster; otherwise it is drawn independently. Source items carry a topic and
their descriptions are drawn from that topic's vocabulary, which is the only
route by which the source domain can reveal the target preference.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError
from .kg import EntityType, KGError, KnowledgeGraph, load_kg, save_kg
from .paths import SCHEMAS, paths_between

# (name, head type, tail type); the first n_relations are used
RELATIONS = (
    ("product.has_feature", "Product", "Feature"),
    ("product.covers_need", "Product", "Need"),
    ("feature.serves_need", "Feature", "Need"),
    ("product.premium_level", "Product", "Feature"),
    ("product.secondary_need", "Product", "Need"),
    ("need.implies_need", "Need", "Need"),
    ("feature.complements_feature", "Feature", "Feature"),
)
FILL_WEIGHTS = (0.2, 0.2, 0.35, 0.1, 0.1, 0.025, 0.025)


class DataError(ValueError):
    """Malformed dataset directory contents."""


@dataclass
class GenConfig:
    n_target_items: int = 42
    n_source_items: int = 200
    n_kg_entities: int = 77
    n_relations: int = 7
    n_triples: int = 282
    n_users: int = 2000
    n_preference_clusters: int = 6
    cross_domain_signal: float = 0.9
    vocab_size: int = 150
    description_length: tuple = (6, 12)
    target_history_length: tuple = (2, 6)
    source_history_length: tuple = (5, 12)
    affinity: float = 0.95
    topic_purity: float = 0.8
    seed: int = 0

    def validate(self):
        n_attr = self.n_kg_entities - self.n_target_items
        C = self.n_preference_clusters
        if self.n_target_items < 2:
            raise ConfigError("need at least 2 target items")
        if n_attr < 2 * C:
            raise ConfigError(f"{n_attr} non-product entities cannot give each of {C} clusters a Feature and a Need")
        if not 1 <= self.n_relations <= len(RELATIONS):
            raise ConfigError(f"n_relations must be in [1, {len(RELATIONS)}]")
        if self.n_relations < 3:
            raise ConfigError("both path schemas need the first 3 relation kinds")
        if not 0.0 <= self.cross_domain_signal <= 1.0:
            raise ConfigError("cross_domain_signal must be in [0, 1]")
        n_feat, n_need = self._split_attributes()
        minimum = 2 * self.n_target_items + n_feat + 2 * C + (self.n_relations - 3)
        if self.n_triples < minimum:
            raise ConfigError(f"triple budget {self.n_triples} below the structural minimum {minimum}")
        if self.n_triples > self._max_triples():
            raise ConfigError(f"triple budget {self.n_triples} exceeds the {self._max_triples()} type-valid slots")
        if self.vocab_size < 2 * C or self.n_source_items < C:
            raise ConfigError("vocabulary and source items must cover every cluster")
        if self.target_history_length[0] < 2:
            raise ConfigError("target histories need at least 2 items (one is held out)")
        if self.target_history_length[1] > self.n_target_items:
            raise ConfigError("target history longer than the item catalogue")

    def _split_attributes(self):
        n_attr = self.n_kg_entities - self.n_target_items
        n_feat = max(self.n_preference_clusters, round(n_attr * 4 / 7))
        return n_feat, n_attr - n_feat

    def _max_triples(self):
        n_feat, n_need = self._split_attributes()
        P = self.n_target_items
        counts = {"Product": P, "Feature": n_feat, "Need": n_need}
        total = 0
        for _, h, t in RELATIONS[:self.n_relations]:
            total += counts[h] * counts[t] - (counts[h] if h == t else 0)
        return total


def desk_config(**kw) -> GenConfig:
    return GenConfig(**kw)


def full_config(**kw) -> GenConfig:
    """Full scale: 21,016 overlapped users and 3,836 source items."""
    base = dict(n_users=21016, n_source_items=3836, vocab_size=600)
    base.update(kw)
    return GenConfig(**base)


@dataclass
class Dataset:
    kg: KnowledgeGraph
    target: dict  # user -> chronological list of product keys
    source: dict  # user -> chronological list of source item ids
    descriptions: dict  # source item id -> space-separated tokens
    overlap: list  # overlapped user ids, sorted
    manifest: dict = field(default_factory=dict)
    clusters: dict = field(default_factory=dict)  # user -> (target cluster, source cluster), generator truth

    @property
    def users(self):
        return sorted(set(self.target) | set(self.source))

    @property
    def target_items(self) -> list:
        return [self.kg.keys[p] for p in self.kg.products]

    @property
    def source_items(self) -> list:
        return sorted(self.descriptions)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.kg == other.kg and self.target == other.target and self.source == other.source
                and self.descriptions == other.descriptions and self.overlap == other.overlap
                and self.clusters == other.clusters)


# ---------------------------------------------------------------- generation


def _build_kg(cfg: GenConfig, rng: np.random.Generator) -> tuple[KnowledgeGraph, dict]:
    C = cfg.n_preference_clusters
    P = cfg.n_target_items
    n_feat, n_need = cfg._split_attributes()
    entities = []
    products = list(range(P))
    features = list(range(P, P + n_feat))
    needs = list(range(P + n_feat, P + n_feat + n_need))
    for i in products:
        entities.append((f"P{i:03d}", f"product {i}", "Product"))
    for k, i in enumerate(features):
        entities.append((f"F{k:03d}", f"feature {k}", "Feature"))
    for k, i in enumerate(needs):
        entities.append((f"N{k:03d}", f"need {k}", "Need"))
    cluster = {}
    for group in (products, features, needs):
        for k, e in enumerate(group):
            cluster[e] = k % C
    by = {"Product": products, "Feature": features, "Need": needs}
    rels = RELATIONS[:cfg.n_relations]
    triples = set()

    def own(group, c):
        return [e for e in by[group] if cluster[e] == c]

    # structural core: every product gets an own-cluster feature and need,
    # every feature an own-cluster need; each cluster's need links two features
    for p in products:
        c = cluster[p]
        triples.add((p, 0, int(rng.choice(own("Feature", c)))))
        triples.add((p, 1, int(rng.choice(own("Need", c)))))
    for f in features:
        triples.add((f, 2, int(rng.choice(own("Need", cluster[f])))))
    for c in range(C):
        fs, ns = own("Feature", c), own("Need", c)
        for n in ns[:1]:
            for f in fs[:2]:
                triples.add((f, 2, n))
    for r in range(3, len(rels)):
        _, ht, tt = rels[r]
        h = int(rng.choice(by[ht]))
        t = int(rng.choice([e for e in by[tt] if e != h]))
        triples.add((h, r, t))
    if len(triples) > cfg.n_triples:
        raise ConfigError(f"structural core needs {len(triples)} triples, budget is {cfg.n_triples}")
    # fill: random type-valid triples, mostly within a cluster, weighted
    # towards the relation kinds that path schemas can traverse
    weights = np.array([FILL_WEIGHTS[r] for r in range(len(rels))])
    weights /= weights.sum()
    guard = 0
    while len(triples) < cfg.n_triples:
        guard += 1
        if guard > 1_000_000:
            raise ConfigError("could not place the requested number of triples")
        r = int(rng.choice(len(rels), p=weights))
        _, ht, tt = rels[r]
        h = int(rng.choice(by[ht]))
        pool = own(tt, cluster[h]) if rng.random() < 0.8 else by[tt]
        pool = [e for e in pool if e != h]
        if not pool:
            continue
        triples.add((h, r, int(rng.choice(pool))))
    ordered = sorted(triples, key=lambda t: (t[1], t[0], t[2]))
    g = KnowledgeGraph(entities, [r[0] for r in rels], ordered)
    return g, {e: c for e, c in cluster.items()}


def _schema_coverage_ok(g: KnowledgeGraph) -> bool:
    """Every product has >= 1 instance of each schema to some other product."""
    prods = g.products
    for p in prods:
        for schema in SCHEMAS:
            if not any(paths_between(g, p, q, schema) for q in prods if q != p):
                return False
    return True


def generate(cfg: GenConfig | None = None) -> Dataset:
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    for attempt in range(50):
        g, cluster = _build_kg(cfg, np.random.default_rng([cfg.seed, attempt]))
        if _schema_coverage_ok(g):
            break
    else:
        raise ConfigError("could not build a graph where every product has paths of both schemas")
    C = cfg.n_preference_clusters
    products = g.products
    cluster_products = [[p for p in products if cluster[p] == c] for c in range(C)]

    # vocabulary: per-topic tokens plus shared filler
    n_generic = max(C, cfg.vocab_size // 5)
    per_topic = (cfg.vocab_size - n_generic) // C
    topic_tokens = [[f"t{c}w{k}" for k in range(per_topic)] for c in range(C)]
    generic = [f"g{k}" for k in range(cfg.vocab_size - per_topic * C)]
    source_ids = [f"S{i:05d}" for i in range(cfg.n_source_items)]
    source_topic = {s: i % C for i, s in enumerate(source_ids)}
    descriptions = {}
    lo, hi = cfg.description_length
    for s in source_ids:
        n = int(rng.integers(lo, hi + 1))
        toks = []
        for _ in range(n):
            pool = topic_tokens[source_topic[s]] if rng.random() < cfg.topic_purity else generic
            toks.append(pool[int(rng.integers(len(pool)))])
        descriptions[s] = " ".join(toks)
    topic_items = [[s for s in source_ids if source_topic[s] == c] for c in range(C)]

    target, source, clusters = {}, {}, {}
    width = len(str(cfg.n_users - 1))
    for u in range(cfg.n_users):
        uid = f"u{u:0{width}d}"
        ct = int(rng.integers(C))
        cs = ct if rng.random() < cfg.cross_domain_signal else int(rng.integers(C))
        clusters[uid] = (ct, cs)
        n_t = int(rng.integers(cfg.target_history_length[0], cfg.target_history_length[1] + 1))
        seq = []
        while len(seq) < n_t:
            pool = cluster_products[ct] if rng.random() < cfg.affinity else products
            pool = [p for p in pool if p not in seq]
            if not pool:
                pool = [p for p in products if p not in seq]
            seq.append(pool[int(rng.integers(len(pool)))])
        target[uid] = [g.keys[p] for p in seq]
        n_s = int(rng.integers(cfg.source_history_length[0], cfg.source_history_length[1] + 1))
        sseq = []
        for _ in range(n_s):
            pool = topic_items[cs] if rng.random() < cfg.affinity else source_ids
            sseq.append(pool[int(rng.integers(len(pool)))])
        source[uid] = sseq
    overlap = sorted(set(target) & set(source))
    manifest = {"generator": asdict(cfg), "counts": _counts(g, target, source, descriptions, overlap)}
    return Dataset(g, target, source, descriptions, overlap, manifest, clusters)


def _counts(g, target, source, descriptions, overlap):
    return {
        "kg_entities": g.n_entities, "kg_relations": len(g.relations), "kg_triples": len(g.triples),
        "target_items": len(g.products), "source_items": len(descriptions),
        "target_interactions": sum(map(len, target.values())),
        "source_interactions": sum(map(len, source.values())),
        "overlapped_users": len(overlap),
    }


# ---------------------------------------------------------------- persistence

FILES = ("entities.tsv", "triples.tsv", "target_interactions.tsv", "source_interactions.tsv",
         "descriptions.tsv", "overlap_users.tsv", "manifest.json")


def save(ds: Dataset, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_kg(ds.kg, d / "entities.tsv", d / "triples.tsv")
    for name, data in (("target_interactions.tsv", ds.target), ("source_interactions.tsv", ds.source)):
        with open(d / name, "w", encoding="utf-8") as fh:
            fh.write("# user\titem\tt\n")
            for u in sorted(data):
                for t, item in enumerate(data[u], 1):
                    fh.write(f"{u}\t{item}\t{t}\n")
    with open(d / "descriptions.tsv", "w", encoding="utf-8") as fh:
        fh.write("# item_id\ttokens\n")
        for s in sorted(ds.descriptions):
            fh.write(f"{s}\t{ds.descriptions[s]}\n")
    with open(d / "overlap_users.tsv", "w", encoding="utf-8") as fh:
        fh.write("# user\n")
        for u in ds.overlap:
            fh.write(f"{u}\n")
    if ds.clusters:
        with open(d / "user_clusters.tsv", "w", encoding="utf-8") as fh:
            fh.write("# user\ttarget_cluster\tsource_cluster\n")
            for u in sorted(ds.clusters):
                fh.write(f"{u}\t{ds.clusters[u][0]}\t{ds.clusters[u][1]}\n")
    manifest = dict(ds.manifest)
    manifest["counts"] = _counts(ds.kg, ds.target, ds.source, ds.descriptions, ds.overlap)
    with open(d / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _rows(path: Path, ncols: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != ncols:
                raise DataError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(cols)}")
            yield lineno, cols


def _sequences(path: Path, known_items, domain):
    seqs, last = {}, {}
    for lineno, (u, item, t) in _rows(path, 3):
        if item not in known_items:
            raise DataError(f"{path}:{lineno}: unknown {domain} item {item!r} for user {u!r}")
        try:
            ts = int(t)
        except ValueError:
            raise DataError(f"{path}:{lineno}: timestamp {t!r} is not an integer") from None
        if u in last and ts <= last[u]:
            raise DataError(f"{path}:{lineno}: timestamps for user {u!r} are not strictly increasing")
        last[u] = ts
        seqs.setdefault(u, []).append(item)
    return seqs


def load(directory) -> Dataset:
    d = Path(directory)
    for name in FILES[:-1]:
        if not (d / name).exists():
            raise DataError(f"missing dataset file {d / name}")
    try:
        g = load_kg(d / "entities.tsv", d / "triples.tsv")
    except KGError as exc:
        raise DataError(str(exc)) from None
    products = {g.keys[p] for p in g.products}
    descriptions = {}
    with open(d / "descriptions.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            item, _, toks = line.partition("\t")
            if item in descriptions:
                raise DataError(f"{d / 'descriptions.tsv'}:{lineno}: duplicate item {item!r}")
            descriptions[item] = toks
    target = _sequences(d / "target_interactions.tsv", products, "target")
    source = _sequences(d / "source_interactions.tsv", set(descriptions), "source")
    overlap = []
    for lineno, (u,) in _rows(d / "overlap_users.tsv", 1):
        if u not in target or u not in source:
            raise DataError(f"{d / 'overlap_users.tsv'}:{lineno}: user {u!r} lacks interactions in both domains")
        overlap.append(u)
    clusters = {}
    if (d / "user_clusters.tsv").exists():
        for _, (u, ct, cs) in _rows(d / "user_clusters.tsv", 3):
            clusters[u] = (int(ct), int(cs))
    manifest = {}
    if (d / "manifest.json").exists():
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    return Dataset(g, target, source, descriptions, sorted(overlap), manifest, clusters)


# ---------------------------------------------------------------- splits


@dataclass
class Splits:
    """Cold-start protocol split.

    ``test_users`` lose all target-domain data; ``train_users`` are the
    eta-fraction of the remaining overlapped users. Each training user's last
    target interaction is held out as their validation item (when they have
    at least two).
    """

    test_users: list
    train_users: list
    train_target: dict  # user -> training target sequence
    validation: dict  # user -> held-out target item
    test_truth: dict  # user -> held-out ground-truth target item
    eta: float
    seed: int
    cold_start_fraction: float


def split(ds: Dataset, cold_start_fraction: float = 0.30, eta: float = 1.0, seed: int = 0) -> Splits:
    if not 0.0 < cold_start_fraction < 1.0:
        raise ConfigError(f"cold_start_fraction must be in (0, 1), got {cold_start_fraction}")
    if not 0.0 < eta <= 1.0:
        raise ConfigError(f"eta must be in (0, 1], got {eta}")
    users = list(ds.overlap)
    rng = np.random.default_rng([seed, 7])
    perm = [users[i] for i in rng.permutation(len(users))]
    n_test = int(round(cold_start_fraction * len(users)))
    test = sorted(perm[:n_test])
    rest = perm[n_test:]
    train = sorted(rest[:int(math.ceil(eta * len(rest)))])
    train_target, validation = {}, {}
    for u in train:
        seq = ds.target[u]
        if len(seq) >= 2:
            train_target[u] = seq[:-1]
            validation[u] = seq[-1]
        else:
            train_target[u] = list(seq)
    test_truth = {u: ds.target[u][-1] for u in test}
    return Splits(test, train, train_target, validation, test_truth, eta, seed, cold_start_fraction)


def audit_split(ds: Dataset, sp: Splits) -> list[str]:
    """Protocol violations in a split (empty when clean)."""
    problems = []
    test = set(sp.test_users)
    if test & set(sp.train_users):
        problems.append("test and training users overlap")
    leaked = test & set(sp.train_target)
    if leaked:
        problems.append(f"target data of test users visible to training: {sorted(leaked)[:5]}")
    for u, seq in sp.train_target.items():
        full = ds.target[u]
        if full[:len(seq)] != seq or (u in sp.validation and full[len(seq)] != sp.validation[u]):
            problems.append(f"training sequence of {u} is not the prefix before its validation item")
    for u, item in sp.test_truth.items():
        if item not in ds.target.get(u, []):
            problems.append(f"ground truth of {u} is not one of its target interactions")
    return problems
