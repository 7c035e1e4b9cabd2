"""Typed insurance knowledge graph: loading, validation, undirected adjacency."""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path


class EntityType(str, enum.Enum):
    PRODUCT = "Product"
    FEATURE = "Feature"
    NEED = "Need"

    @property
    def short(self) -> str:
        return self.value[0]


FORWARD = "forward"
REVERSE = "reverse"


class KGError(ValueError):
    """Malformed or inconsistent graph input."""


class KGLookupError(KeyError):
    pass


@dataclass
class SchemaReport:
    type_counts: dict
    n_entities: int
    n_relations: int
    n_triples: int
    violations: list = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations


class KnowledgeGraph:
    """Immutable after construction. Entity and relation ids are dense ints
    assigned in input order; ``keys`` keep the external string ids."""

    def __init__(self, entities, relations, triples):
        # entities: list of (key, name, EntityType); relations: list of names;
        # triples: list of (head idx, relation idx, tail idx)
        self.keys = [e[0] for e in entities]
        self.names = [e[1] for e in entities]
        self.types = [EntityType(e[2]) for e in entities]
        self.relations = list(relations)
        self.triples = [tuple(map(int, t)) for t in triples]
        self.key_index = {k: i for i, k in enumerate(self.keys)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        violations = self._violations()
        if violations:
            raise KGError("; ".join(violations))
        adj = [[] for _ in self.keys]
        for h, r, t in self.triples:
            adj[h].append((t, r, FORWARD))
            adj[t].append((h, r, REVERSE))
        self.adjacency = [tuple(sorted(a)) for a in adj]
        self._triple_set = frozenset(self.triples)

    def _violations(self):
        out = []
        n, m = len(self.keys), len(self.relations)
        if len(self.key_index) != n:
            dup = [k for k, c in Counter(self.keys).items() if c > 1]
            out.append(f"duplicate entity ids {dup}")
        seen = set()
        for h, r, t in self.triples:
            if not (0 <= h < n and 0 <= t < n):
                out.append(f"dangling entity in triple {(h, r, t)}")
            if not 0 <= r < m:
                out.append(f"dangling relation in triple {(h, r, t)}")
            if h == t:
                out.append(f"self loop on entity {h}")
            if (h, r, t) in seen:
                out.append(f"duplicate triple {(h, r, t)}")
            seen.add((h, r, t))
        return out

    @property
    def n_entities(self) -> int:
        return len(self.keys)

    def entity(self, key: str) -> int:
        try:
            return self.key_index[key]
        except KeyError:
            raise KGLookupError(f"unknown entity {key!r}") from None

    def check(self, e: int) -> int:
        if not 0 <= e < len(self.keys):
            raise KGLookupError(f"unknown entity id {e}")
        return e

    def of_type(self, t: EntityType) -> list[int]:
        return [i for i, ty in enumerate(self.types) if ty == t]

    @property
    def products(self) -> list[int]:
        return self.of_type(EntityType.PRODUCT)

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.keys == other.keys and self.names == other.names and self.types == other.types
                and self.relations == other.relations and set(self.triples) == set(other.triples))


def neighbors(g: KnowledgeGraph, e: int, required_type: EntityType | None = None):
    """Undirected neighbours of ``e`` as ``(entity, relation, direction)``,
    sorted by (entity id, relation id)."""
    g.check(e)
    adj = g.adjacency[e]
    if required_type is None:
        return list(adj)
    return [a for a in adj if g.types[a[0]] == required_type]


def stats(g: KnowledgeGraph | None) -> SchemaReport:
    if g is None:
        return SchemaReport({t.value: 0 for t in EntityType}, 0, 0, 0)
    counts = Counter(t.value for t in g.types)
    return SchemaReport({t.value: counts.get(t.value, 0) for t in EntityType},
                        g.n_entities, len(g.relations), len(g.triples))


def _rows(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line.split("\t")


def load_kg(entities_path, triples_path) -> KnowledgeGraph:
    """Read ``entities.tsv`` (id, name, type) and ``triples.tsv`` (head, relation, tail)."""
    entities_path, triples_path = Path(entities_path), Path(triples_path)
    entities, keys = [], set()
    for lineno, cols in _rows(entities_path):
        if len(cols) != 3:
            raise KGError(f"{entities_path}:{lineno}: expected 3 tab-separated fields, got {len(cols)}")
        key, name, typ = cols
        try:
            EntityType(typ)
        except ValueError:
            raise KGError(f"{entities_path}:{lineno}: unknown entity type {typ!r}") from None
        if key in keys:
            raise KGError(f"{entities_path}:{lineno}: duplicate entity id {key!r}")
        keys.add(key)
        entities.append((key, name, typ))
    index = {e[0]: i for i, e in enumerate(entities)}
    relations, rel_index, triples, seen = [], {}, [], set()
    for lineno, cols in _rows(triples_path):
        if len(cols) != 3:
            raise KGError(f"{triples_path}:{lineno}: expected 3 tab-separated fields, got {len(cols)}")
        h, r, t = cols
        for k in (h, t):
            if k not in index:
                raise KGError(f"{triples_path}:{lineno}: dangling reference to entity {k!r}")
        if r not in rel_index:
            rel_index[r] = len(relations)
            relations.append(r)
        trip = (index[h], rel_index[r], index[t])
        if trip in seen:
            raise KGError(f"{triples_path}:{lineno}: duplicate triple {h} {r} {t}")
        if trip[0] == trip[2]:
            raise KGError(f"{triples_path}:{lineno}: self loop on {h!r}")
        seen.add(trip)
        triples.append(trip)
    return KnowledgeGraph(entities, relations, triples)


def save_kg(g: KnowledgeGraph, entities_path, triples_path):
    with open(entities_path, "w", encoding="utf-8") as fh:
        fh.write("# entity_id\tname\ttype\n")
        for k, n, t in zip(g.keys, g.names, g.types):
            fh.write(f"{k}\t{n}\t{t.value}\n")
    with open(triples_path, "w", encoding="utf-8") as fh:
        fh.write("# head_id\trelation_name\ttail_id\n")
        for h, r, t in g.triples:
            fh.write(f"{g.keys[h]}\t{g.relations[r]}\t{g.keys[t]}\n")


FIXTURE_DIR = Path(__file__).parent / "data" / "toy_iskg"


def load_toy() -> KnowledgeGraph:
    """The bundled 15-entity, 20-triple demonstration graph."""
    return load_kg(FIXTURE_DIR / "entities.tsv", FIXTURE_DIR / "triples.tsv")
