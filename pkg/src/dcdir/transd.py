"""TransD pretraining of entity and relation vectors (equal entity/relation dims).

With both spaces of dimension d the TransD projection matrix
``M = r_p e_p^T + I`` applied to ``e`` is ``e + (e_p . e) r_p``, which is what
:func:`project` computes without materialising M.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .kg import KGLookupError, KnowledgeGraph

log = logging.getLogger(__name__)


@dataclass
class TransDConfig:
    dim: int = 50
    margin: float = 1.0
    epochs: int = 200
    lr: float = 0.01
    negatives: int = 1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ad.ConfigError("TransD dim must be >= 1")
        if self.margin <= 0:
            raise ad.ConfigError("TransD margin must be positive")


@dataclass(eq=False)
class TransDTable:
    entity_keys: list
    relation_names: list
    entity: Parameter
    entity_proj: Parameter
    relation: Parameter
    relation_proj: Parameter
    loss_history: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.entity.value.shape[1]

    def parameters(self):
        return [self.entity, self.entity_proj, self.relation, self.relation_proj]

    def check(self, h, r, t):
        n, m = self.entity.value.shape[0], self.relation.value.shape[0]
        for e in np.atleast_1d(h).tolist() + np.atleast_1d(t).tolist():
            if not 0 <= e < n:
                raise KGLookupError(f"unknown entity id {e}")
        for x in np.atleast_1d(r).tolist():
            if not 0 <= x < m:
                raise KGLookupError(f"unknown relation id {x}")

    def copy(self) -> "TransDTable":
        return TransDTable(list(self.entity_keys), list(self.relation_names),
                           *[Parameter(p.name, p.value.copy()) for p in self.parameters()],
                           loss_history=list(self.loss_history))


def project(e: Var, e_p: Var, r_p: Var) -> Var:
    """``e + (e_p . e) r_p`` row-wise."""
    return ad.add(e, ad.mul(ad.unsqueeze(ad.rowdot(e_p, e)), r_p))


def project_values(e, e_p, r_p) -> np.ndarray:
    return e + np.sum(e_p * e, axis=-1, keepdims=True) * r_p


def energy_on_tape(tape: Tape, table: TransDTable, h, r, t) -> Var:
    E, Ep = tape.param(table.entity), tape.param(table.entity_proj)
    R, Rp = tape.param(table.relation), tape.param(table.relation_proj)
    rp = ad.gather(Rp, r)
    h_perp = project(ad.gather(E, h), ad.gather(Ep, h), rp)
    t_perp = project(ad.gather(E, t), ad.gather(Ep, t), rp)
    return ad.sq_norm(ad.sub(ad.add(h_perp, ad.gather(R, r)), t_perp))


def transd_energy(table: TransDTable, triple) -> float | np.ndarray:
    """Squared-L2 TransD energy of one ``(h, r, t)`` or of index arrays."""
    h, r, t = (np.asarray(x, dtype=np.int64) for x in triple)
    table.check(h, r, t)
    E, Ep = table.entity.value, table.entity_proj.value
    R, Rp = table.relation.value, table.relation_proj.value
    diff = project_values(E[h], Ep[h], Rp[r]) + R[r] - project_values(E[t], Ep[t], Rp[r])
    out = np.sum(diff * diff, axis=-1)
    return float(out) if out.ndim == 0 else out


def _clip_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x /= np.maximum(norms, 1.0)


def renormalize(table: TransDTable, triples):
    """Enforce ``|e| <= 1``, ``|r| <= 1`` and ``|e_perp| <= 1`` on every training triple.

    ``e_perp`` is linear in ``e``, so shrinking ``e`` by its worst-case ratio
    satisfies all of an entity's constraints at once.
    """
    E, Ep = table.entity.value, table.entity_proj.value
    _clip_rows(table.relation.value)
    _clip_rows(E)
    if len(triples) == 0:
        return
    tr = np.asarray(triples, dtype=np.int64)
    Rp = table.relation_proj.value
    ents = np.concatenate([tr[:, 0], tr[:, 2]])
    rels = np.concatenate([tr[:, 1], tr[:, 1]])
    norms = np.linalg.norm(project_values(E[ents], Ep[ents], Rp[rels]), axis=1)
    worst = np.ones(E.shape[0])
    np.maximum.at(worst, ents, norms)
    E /= worst[:, None]


def init_table(g: KnowledgeGraph, dim: int, rng: np.random.Generator) -> TransDTable:
    bound = 6.0 / math.sqrt(dim)
    n, m = g.n_entities, len(g.relations)

    def uniform(rows, name):
        x = rng.uniform(-bound, bound, size=(rows, dim))
        _clip_rows(x)
        return Parameter(name, x)

    table = TransDTable(list(g.keys), list(g.relations), uniform(n, "kg.entity"),
                        uniform(n, "kg.entity_proj"), uniform(m, "kg.relation"),
                        uniform(m, "kg.relation_proj"))
    renormalize(table, g.triples)
    return table


class Corrupter:
    """Uniform head-or-tail replacement by a type-compatible entity that does
    not form an existing triple."""

    def __init__(self, g: KnowledgeGraph):
        self.g = g
        self.known = set(g.triples)
        self.by_type = {t: np.array(g.of_type(t)) for t in set(g.types)}
        self.everyone = np.arange(g.n_entities)
        self._warned = False

    def _pool(self, h, r, t, slot):
        g = self.g
        pool = self.by_type[g.types[h if slot == 0 else t]]
        ok = [c for c in pool.tolist() if c != (h if slot == 0 else t)
              and ((c, r, t) if slot == 0 else (h, r, c)) not in self.known and c != (t if slot == 0 else h)]
        if ok:
            return ok
        if not self._warned:
            log.warning("no type-compatible corruption for %s; falling back to any entity", (h, r, t))
            self._warned = True
        return [c for c in self.everyone.tolist() if ((c, r, t) if slot == 0 else (h, r, c)) not in self.known
                and c not in (h, t)]

    def corrupt(self, triple, rng: np.random.Generator):
        h, r, t = triple
        slot = int(rng.integers(2))
        pool = self._pool(h, r, t, slot)
        c = pool[int(rng.integers(len(pool)))]
        return (c, r, t) if slot == 0 else (h, r, c)


def margin_loss(table: TransDTable, pos, neg, margin: float) -> float:
    pos, neg = np.asarray(pos), np.asarray(neg)
    ep = transd_energy(table, (pos[:, 0], pos[:, 1], pos[:, 2]))
    en = transd_energy(table, (neg[:, 0], neg[:, 1], neg[:, 2]))
    return float(np.sum(np.maximum(0.0, margin + ep - en)))


def pretrain(g: KnowledgeGraph, cfg: TransDConfig | None = None) -> TransDTable:
    """Margin-ranking TransD training; seeded and deterministic.

    ``table.loss_history[k]`` is the full-batch margin loss after epoch ``k``
    (index 0 is the initial table) against one fixed, seeded corruption set,
    so epoch-to-epoch values are comparable.
    """
    cfg = cfg or TransDConfig()
    if not g.triples:
        raise ad.ConfigError("TransD pretraining needs at least one triple")
    rng = np.random.default_rng(cfg.seed)
    table = init_table(g, cfg.dim, rng)
    corrupter = Corrupter(g)
    triples = np.array(g.triples, dtype=np.int64)
    monitor_rng = np.random.default_rng([cfg.seed, 1])
    monitor_neg = np.array([corrupter.corrupt(tuple(t), monitor_rng) for t in triples.tolist()])
    table.loss_history.append(margin_loss(table, triples, monitor_neg, cfg.margin))
    params = table.parameters()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(triples))
        for start in range(0, len(order), cfg.batch_size):
            pos = triples[order[start:start + cfg.batch_size]]
            pos = np.repeat(pos, cfg.negatives, axis=0)
            neg = np.array([corrupter.corrupt(tuple(t), rng) for t in pos.tolist()])
            tape = Tape()
            e_pos = energy_on_tape(tape, table, pos[:, 0], pos[:, 1], pos[:, 2])
            e_neg = energy_on_tape(tape, table, neg[:, 0], neg[:, 1], neg[:, 2])
            gap = ad.add(ad.sub(e_pos, e_neg), tape.const(cfg.margin))
            tape.backward(ad.total(ad.relu(gap)))
            ad.adam_step(params, lr=cfg.lr)
        renormalize(table, g.triples)
        table.loss_history.append(margin_loss(table, triples, monitor_neg, cfg.margin))
    return table


def save_table(table: TransDTable, path):
    """TSV: ``id<TAB>kind<TAB>v1 ... vd`` with kind in e|ep|r|rp.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# transd dim={table.dim}\n")
        for kind, keys, p in (("e", table.entity_keys, table.entity), ("ep", table.entity_keys, table.entity_proj),
                              ("r", table.relation_names, table.relation),
                              ("rp", table.relation_names, table.relation_proj)):
            for key, row in zip(keys, p.value):
                fh.write(f"{key}\t{kind}\t" + " ".join(repr(float(x)) for x in row) + "\n")


def load_table(path) -> TransDTable:
    rows = {"e": {}, "ep": {}, "r": {}, "rp": {}}
    order = {"e": [], "r": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("#") or not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 3 or cols[1] not in rows:
                raise ValueError(f"{path}:{lineno}: malformed TransD row")
            key, kind, vals = cols
            rows[kind][key] = np.array([float(v) for v in vals.split()])
            if kind in order:
                order[kind].append(key)
    ek, rk = order["e"], order["r"]

    def mat(kind, keys, name):
        return Parameter(name, np.stack([rows[kind][k] for k in keys]))

    return TransDTable(ek, rk, mat("e", ek, "kg.entity"), mat("ep", ek, "kg.entity_proj"),
                       mat("r", rk, "kg.relation"), mat("rp", rk, "kg.relation_proj"))
