"""Target-domain user features from knowledge-graph paths.

Each selected path is a sequence of five entity vectors; a GRU runs over it
from a zero state and the final hidden state is the path encoding. The user
feature for a (user, target item) pair is the elementwise max over the
encodings of that pair's selected paths, or a learned fallback vector when no
path exists.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .paths import PathSet, two_hop_members
from .kg import EntityType, KnowledgeGraph


class GruCell:
    """Update gate ``x``, reset gate ``r``, candidate ``h~``:

        x_n = sigmoid(W_x e_n + U_x h_{n-1} + b_x)
        r_n = sigmoid(W_r e_n + U_r h_{n-1} + b_r)
        h~_n = tanh(W_h e_n + r_n * (U_h h_{n-1}) + b_h)
        h_n = (1 - x_n) * h_{n-1} + x_n * h~_n

    Hidden size equals input size.
    """

    names = ("W_x", "W_r", "W_h", "U_x", "U_r", "U_h", "b_x", "b_r", "b_h")

    def __init__(self, dim: int, rng: np.random.Generator | None = None, prefix: str = "gru"):
        self.dim = dim
        bound = 1.0 / np.sqrt(dim)
        self.prefix = prefix
        for n in self.names:
            shape = (dim,) if n.startswith("b") else (dim, dim)
            value = np.zeros(shape) if rng is None or n.startswith("b") else rng.uniform(-bound, bound, shape)
            setattr(self, n, Parameter(f"{prefix}.{n}", value))

    def parameters(self) -> list[Parameter]:
        return [getattr(self, n) for n in self.names]

    def bind(self, tape: Tape) -> dict:
        return {n: tape.param(getattr(self, n)) for n in self.names}


def gru_step(cell: GruCell | dict, e_n: Var, h_prev: Var) -> Var:
    """One step on a vector or a ``(B, d)`` batch. ``cell`` may be pre-bound."""
    w = cell.bind(e_n.tape) if isinstance(cell, GruCell) else cell
    x = ad.sigmoid(ad.add(ad.affine(w["W_x"], e_n, w["b_x"]), ad.affine(w["U_x"], h_prev)))
    r = ad.sigmoid(ad.add(ad.affine(w["W_r"], e_n, w["b_r"]), ad.affine(w["U_r"], h_prev)))
    cand = ad.tanh(ad.add(ad.affine(w["W_h"], e_n, w["b_h"]), ad.mul(r, ad.affine(w["U_h"], h_prev))))
    one = e_n.tape.const(1.0)
    return ad.add(ad.mul(ad.sub(one, x), h_prev), ad.mul(x, cand))


def run_gru(cell: GruCell, steps: list[Var]) -> Var:
    """Final hidden state after feeding ``steps`` in order from ``h_0 = 0``."""
    tape = steps[0].tape
    w = cell.bind(tape)
    h = tape.const(np.zeros(steps[0].value.shape))
    for e in steps:
        h = gru_step(w, e, h)
    return h


def encode_paths_on_tape(cell: GruCell, entity_table: Var, entity_matrix) -> Var:
    """``(N, L)`` entity ids -> ``(N, d)`` path encodings."""
    ents = np.asarray(entity_matrix, dtype=np.int64)
    steps = [ad.gather(entity_table, ents[:, j]) for j in range(ents.shape[1])]
    return run_gru(cell, steps)


def encode_path(cell: GruCell, path, table) -> np.ndarray:
    tape = Tape(record=False)
    ents = np.asarray([path.entities if hasattr(path, "entities") else path])
    return encode_paths_on_tape(cell, tape.param(table.entity), ents).value[0]


class NoPathFallback:
    def __init__(self, dim: int, rng: np.random.Generator | None = None):
        value = np.zeros(dim) if rng is None else rng.normal(0.0, 0.1, dim)
        self.vector = Parameter("target.no_path", value)

    def parameters(self):
        return [self.vector]


@dataclass
class TargetUserFeature:
    u_t: np.ndarray
    provenance: tuple  # pooled path entity tuples, or ("fallback",)

    @property
    def fallback(self) -> bool:
        return self.provenance == ("fallback",)


def pool_pairs(tape: Tape, cell: GruCell, entity_table: Var, path_groups, fallback: NoPathFallback) -> Var:
    """Max-pooled path encodings for a batch of pairs -> ``(B, d)``.

    ``path_groups[b]`` is the ``(k_b, 5)`` entity matrix of pair ``b``; empty
    groups take the fallback vector.
    """
    sizes = [len(g) for g in path_groups]
    nonempty = [i for i, n in enumerate(sizes) if n]
    parts = []
    if nonempty:
        mats = np.concatenate([path_groups[i] for i in nonempty])
        seg = np.repeat(np.arange(len(nonempty)), [sizes[i] for i in nonempty])
        encoded = encode_paths_on_tape(cell, entity_table, mats)
        parts.append(ad.segment_max(encoded, seg, len(nonempty)))
    fb_row = len(nonempty)
    parts.append(tape.param(fallback.vector))
    slot = {i: k for k, i in enumerate(nonempty)}
    index = [slot.get(i, fb_row) for i in range(len(path_groups))]
    return ad.gather(ad.concat_rows(parts), index)


def user_target_feature(cell: GruCell, topk: PathSet, table, fallback: NoPathFallback) -> TargetUserFeature:
    if not topk.paths:
        return TargetUserFeature(fallback.vector.value.copy(), ("fallback",))
    tape = Tape(record=False)
    mat = topk.entity_matrix()
    u = pool_pairs(tape, cell, tape.param(table.entity), [mat], fallback).value[0]
    return TargetUserFeature(u, tuple(map(tuple, mat.tolist())))


def predict(u_t, v_t) -> float:
    """sigmoid(u_t . v_t)."""
    u_t, v_t = np.asarray(u_t, dtype=float), np.asarray(v_t, dtype=float)
    if u_t.shape != v_t.shape:
        raise ad.DimensionError(f"predict: {u_t.shape} vs {v_t.shape}")
    z = float(u_t @ v_t)
    return float(ad._sigmoid(np.array([z]))[0])


# ---------------------------------------------------------------- ablation item features


def attribute_members(g: KnowledgeGraph, item: int) -> list[int]:
    """Features and Needs directly linked to ``item``."""
    g.check(item)
    return sorted({nb for nb, _, _ in g.adjacency[item]
                   if g.types[nb] in (EntityType.FEATURE, EntityType.NEED)})


def encode_v1_attributes(g: KnowledgeGraph, item: int, table) -> np.ndarray:
    vectors = np.asarray(getattr(getattr(table, "entity", None), "value", table))
    members = attribute_members(g, item)
    if not members:
        return np.zeros(vectors.shape[1])
    return vectors[members].mean(axis=0)


class ItemAggregator:
    """Per-item mean over a fixed member set, on the tape (V1 and V2 variants)."""

    def __init__(self, g: KnowledgeGraph, variant: str):
        members = attribute_members if variant == "v1" else two_hop_members
        self.members = {p: members(g, p) for p in g.products}

    def on_tape(self, entity_table: Var, items) -> Var:
        rows, seg = [], []
        for k, it in enumerate(items):
            m = self.members[it]
            rows.extend(m)
            seg.extend([k] * len(m))
        if not rows:
            return entity_table.tape.const(np.zeros((len(items), entity_table.value.shape[1])))
        return ad.segment_mean(ad.gather(entity_table, rows), seg, len(items))
