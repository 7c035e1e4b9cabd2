"""Meta-path instances between a user's history products and a target product.

Two fixed schemas are supported, Product-Feature-Need-Feature-Product and
Product-Need-Feature-Need-Product, traversed over the undirected view of the
graph. Paths are scored by a recency term (softmax across the candidate set of
``position / len(history)``) plus the summed cosine similarity of the first
four entities to the target entity, then truncated to the best K.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import softmax_values
from .kg import EntityType, KGLookupError, KnowledgeGraph, neighbors

P, F, N = EntityType.PRODUCT, EntityType.FEATURE, EntityType.NEED
PFNFP = (P, F, N, F, P)
PNFNP = (P, N, F, N, P)
SCHEMAS = (PFNFP, PNFNP)
DEFAULT_CAP = 10_000


class ScoringError(ValueError):
    pass


def schema_name(schema) -> str:
    return "".join(t.short for t in schema)


@dataclass(frozen=True)
class PathInstance:
    entities: tuple
    relations: tuple
    schema: tuple
    start_position: int  # 1-based position of entities[0] in the history, 1 = oldest
    score: float | None = None

    @property
    def target(self) -> int:
        return self.entities[-1]


@dataclass
class PathSet:
    user: object
    target: int
    history_len: int
    paths: list = field(default_factory=list)
    truncated: bool = False

    def __len__(self):
        return len(self.paths)

    def entity_matrix(self) -> np.ndarray:
        return np.array([p.entities for p in self.paths], dtype=np.int64).reshape(-1, 5)


def _walk(g: KnowledgeGraph, start: int, target: int, schema):
    """Typed depth-first search; yields (entities, relations) in sorted order."""
    ents, rels = [start], []

    def rec(depth):
        if depth == len(schema):
            if ents[-1] == target:
                yield tuple(ents), tuple(rels)
            return
        last = depth == len(schema) - 1
        prev = None
        for nb, rel, _ in neighbors(g, ents[-1], schema[depth]):
            if nb == prev:  # parallel edge, keep the lowest relation id
                continue
            prev = nb
            if nb in ents or (last and nb != target) or (not last and nb == target):
                continue
            ents.append(nb)
            rels.append(rel)
            yield from rec(depth + 1)
            ents.pop()
            rels.pop()

    yield from rec(1)


def paths_between(g: KnowledgeGraph, start: int, target: int, schema) -> list[tuple]:
    if start == target:
        return []
    return list(_walk(g, start, target, schema))


def _check_product(g: KnowledgeGraph, e: int):
    g.check(e)
    if g.types[e] != P:
        raise KGLookupError(f"entity {g.keys[e]!r} is a {g.types[e].value}, not a Product")


def history_positions(history: Sequence[int], exclude: int | None = None) -> dict:
    """Start item -> 1-based position of its most recent occurrence."""
    pos = {}
    for i, item in enumerate(history, 1):
        if item != exclude:
            pos[item] = i
    return pos


def enumerate_paths(g: KnowledgeGraph, history: Sequence[int], target: int, schemas=SCHEMAS,
                    user=None, cap: int = DEFAULT_CAP) -> PathSet:
    """Every schema-conforming simple path from a history product to ``target``.

    ``target`` is dropped from the start set when it occurs in ``history``.
    Output order: schema, then entity tuple.
    """
    _check_product(g, target)
    for h in history:
        _check_product(g, h)
    pos = history_positions(history, exclude=target)
    out = []
    for schema in schemas:
        found = []
        for start in sorted(pos):
            for ents, rels in _walk(g, start, target, schema):
                found.append(PathInstance(ents, rels, tuple(schema), pos[start]))
        found.sort(key=lambda p: p.entities)
        out.extend(found)
    truncated = len(out) > cap
    return PathSet(user, target, len(history), out[:cap], truncated)


def validate_path(g: KnowledgeGraph, p: PathInstance, history: Sequence[int], target: int) -> list[str]:
    """Problems with ``p`` (empty when it is a valid instance)."""
    problems = []
    if len(p.entities) != 5 or len(p.relations) != 4:
        problems.append("wrong length")
        return problems
    if tuple(g.types[e] for e in p.entities) != tuple(p.schema) or tuple(p.schema) not in SCHEMAS:
        problems.append("types do not match schema")
    if len(set(p.entities)) != 5:
        problems.append("not simple")
    if p.entities[-1] != target:
        problems.append("does not end at target")
    if p.entities[0] not in history or p.entities[0] == target:
        problems.append("start not in history")
    elif history_positions(history, exclude=target)[p.entities[0]] != p.start_position:
        problems.append("wrong start position")
    for a, r, b in zip(p.entities, p.relations, p.entities[1:]):
        if (a, r, b) not in g._triple_set and (b, r, a) not in g._triple_set:
            problems.append(f"no edge {a}-{r}-{b}")
    return problems


# ---------------------------------------------------------------- scoring


def recency_terms(positions, history_len: int) -> np.ndarray:
    if history_len < 1:
        raise ScoringError("history length must be >= 1")
    return softmax_values(np.asarray(positions, dtype=np.float64) / history_len)


def similarity_terms(entity_matrix: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Sum over the first four entities of cos(e_i, e_target), per path."""
    ents = np.asarray(entity_matrix, dtype=np.int64)
    norms = np.linalg.norm(vectors, axis=1)
    used = np.unique(ents)
    bad = used[norms[used] == 0.0]
    if bad.size:
        raise ScoringError(f"zero-norm embedding for entity id {int(bad[0])}")
    unit = vectors / np.where(norms == 0.0, 1.0, norms)[:, None]
    return np.einsum("pld,pd->p", unit[ents[:, :-1]], unit[ents[:, -1]])


def score_paths(ps: PathSet, table, history_len: int | None = None) -> PathSet:
    """Attach scores; ``table`` is a TransD table or a raw ``(n_entities, d)`` array."""
    if not ps.paths:
        raise ScoringError("cannot score an empty path set")
    history_len = ps.history_len if history_len is None else history_len
    vectors = getattr(getattr(table, "entity", None), "value", table)
    rec = recency_terms([p.start_position for p in ps.paths], history_len)
    sim = similarity_terms(ps.entity_matrix(), np.asarray(vectors))
    scored = [replace(p, score=float(r + s)) for p, r, s in zip(ps.paths, rec, sim)]
    return replace(ps, paths=scored)


def top_k_order(scores, entity_matrix, k: int) -> np.ndarray:
    """Indices of the best ``k`` rows by (score desc, entity tuple asc)."""
    if k < 1:
        raise ValueError("K must be >= 1")
    ents = np.asarray(entity_matrix).reshape(len(scores), -1)
    keys = [ents[:, j] for j in range(ents.shape[1] - 1, -1, -1)] + [-np.asarray(scores)]
    return np.lexsort(keys)[:k]


def top_k(ps: PathSet, k: int) -> PathSet:
    if k < 1:
        raise ValueError("K must be >= 1")
    if not ps.paths:
        return replace(ps, paths=[])
    if any(p.score is None for p in ps.paths):
        raise ScoringError("top_k needs a scored path set")
    idx = top_k_order([p.score for p in ps.paths], ps.entity_matrix(), k)
    return replace(ps, paths=[ps.paths[i] for i in idx])


def random_k(ps: PathSet, k: int, rng: np.random.Generator) -> PathSet:
    """Uniform sample of ``k`` paths without replacement, kept in input order."""
    if k >= len(ps.paths):
        return replace(ps, paths=list(ps.paths))
    idx = np.sort(rng.choice(len(ps.paths), size=k, replace=False))
    return replace(ps, paths=[ps.paths[i] for i in idx])


# ---------------------------------------------------------------- 2-hop aggregation


def two_hop_members(g: KnowledgeGraph, item: int) -> list[int]:
    """The item, its undirected 1-hop and 2-hop neighbours, deduplicated and sorted."""
    g.check(item)
    seen = {item}
    frontier = [item]
    for _ in range(2):
        nxt = []
        for e in frontier:
            for nb, _, _ in g.adjacency[e]:
                if nb not in seen:
                    seen.add(nb)
                    nxt.append(nb)
        frontier = nxt
    return sorted(seen)


def kge_aggregate_2hop(g: KnowledgeGraph, item: int, table) -> np.ndarray:
    vectors = np.asarray(getattr(getattr(table, "entity", None), "value", table))
    return vectors[two_hop_members(g, item)].mean(axis=0)


# ---------------------------------------------------------------- explanation


def format_path(g: KnowledgeGraph, p: PathInstance) -> str:
    parts = [g.names[p.entities[0]]]
    for r, e in zip(p.relations, p.entities[1:]):
        parts.append(f"-[{g.relations[r]}]- {g.names[e]}")
    return f"{p.score:.6f}\t" + " ".join(parts)


class PathIndex:
    """All schema paths between every ordered pair of products, precomputed.

    Used by training, where the same (start, target) pairs recur across users.
    ``pair_paths(s, t)`` returns an ``(n, 5)`` int array ordered by schema then
    entity tuple, matching :func:`enumerate_paths`.
    """

    def __init__(self, g: KnowledgeGraph, schemas=SCHEMAS):
        self.g = g
        self.schemas = tuple(schemas)
        self._cache = {}
        self._rels = {}

    def _build(self, s, t):
        ents, rels, schema_ids = [], [], []
        for k, schema in enumerate(self.schemas):
            for e, r in paths_between(self.g, s, t, schema):
                ents.append(e)
                rels.append(r)
                schema_ids.append(k)
        arr = np.array(ents, dtype=np.int64).reshape(-1, 5)
        self._cache[s, t] = (arr, np.array(schema_ids, dtype=np.int64))
        self._rels[s, t] = rels

    def pair_paths(self, s: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        if (s, t) not in self._cache:
            self._build(s, t)
        return self._cache[s, t]

    def candidates(self, history: Sequence[int], target: int, cap: int = DEFAULT_CAP):
        """Entity matrix, start positions and schema ids for one (history, target)."""
        pos = history_positions(history, exclude=target)
        mats, positions, schema_ids = [], [], []
        for start in sorted(pos):
            arr, sid = self.pair_paths(start, target)
            if len(arr):
                mats.append(arr)
                schema_ids.append(sid)
                positions.append(np.full(len(arr), pos[start], dtype=np.int64))
        if not mats:
            return np.zeros((0, 5), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        ents = np.concatenate(mats)
        sid = np.concatenate(schema_ids)
        pos_arr = np.concatenate(positions)
        order = np.lexsort([ents[:, j] for j in range(4, -1, -1)] + [sid])
        order = order[:cap]
        return ents[order], pos_arr[order], sid[order]
