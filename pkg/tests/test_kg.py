import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcdir.kg import (FIXTURE_DIR, EntityType, KGError, KGLookupError, KnowledgeGraph, load_kg, neighbors,
                      save_kg, stats)
from dcdir.synth import GenConfig, generate


def _write(tmp_path, entities, triples):
    e, t = tmp_path / "entities.tsv", tmp_path / "triples.tsv"
    e.write_text("".join("\t".join(r) + "\n" for r in entities))
    t.write_text("".join("\t".join(r) + "\n" for r in triples))
    return e, t


def test_toy_fixture_loads_clean(toy_kg):
    rep = stats(toy_kg)
    assert rep.valid
    assert rep.type_counts == {"Product": 6, "Feature": 5, "Need": 4}
    assert rep.n_entities == 15 and rep.n_triples == 20


def test_toy_fixture_independent_count():
    # count rows straight from the files
    rows = [l for l in (FIXTURE_DIR / "triples.tsv").read_text().splitlines() if l and not l.startswith("#")]
    ents = [l for l in (FIXTURE_DIR / "entities.tsv").read_text().splitlines() if l and not l.startswith("#")]
    assert len(rows) == 20 and len(ents) == 15


def test_dangling_reference_names_id(tmp_path):
    e, t = _write(tmp_path, [("A", "a", "Product")], [("A", "r", "GHOST")])
    with pytest.raises(KGError, match="GHOST"):
        load_kg(e, t)


def test_error_carries_line_number(tmp_path):
    e, t = _write(tmp_path, [("A", "a", "Product"), ("B", "b", "Unicorn")], [])
    with pytest.raises(KGError, match=r"entities.tsv:2"):
        load_kg(e, t)


def test_duplicate_and_self_loop_rejected(tmp_path):
    e, t = _write(tmp_path, [("A", "a", "Product"), ("B", "b", "Feature")], [("A", "r", "B"), ("A", "r", "B")])
    with pytest.raises(KGError, match="duplicate"):
        load_kg(e, t)
    e, t = _write(tmp_path, [("A", "a", "Product")], [("A", "r", "A")])
    with pytest.raises(KGError, match="self loop"):
        load_kg(e, t)


def test_unknown_lookup(toy_kg):
    with pytest.raises(KGLookupError):
        toy_kg.entity("nope")
    with pytest.raises(KGLookupError):
        neighbors(toy_kg, 999)


def test_isolated_entity_has_no_neighbors():
    g = KnowledgeGraph([("A", "a", "Product"), ("B", "b", "Need")], [], [])
    assert neighbors(g, 0) == []


def test_neighbors_forward_and_reverse():
    g = KnowledgeGraph([("A", "a", "Product"), ("B", "b", "Feature"), ("C", "c", "Need")],
                       ["r1", "r2"], [(0, 0, 1), (2, 1, 0)])
    assert neighbors(g, 0) == [(1, 0, "forward"), (2, 1, "reverse")]


def test_type_filter():
    g = KnowledgeGraph([("P", "p", "Product"), ("F1", "f", "Feature"), ("F2", "f", "Feature"), ("N", "n", "Need")],
                       ["has", "covers"], [(0, 0, 1), (0, 0, 2), (0, 1, 3)])
    assert neighbors(g, 0, EntityType.NEED) == [(3, 1, "forward")]


def test_empty_stats():
    rep = stats(None)
    assert rep.n_entities == rep.n_relations == rep.n_triples == 0
    assert set(rep.type_counts.values()) == {0}


def test_round_trip(toy_kg, tmp_path):
    save_kg(toy_kg, tmp_path / "e.tsv", tmp_path / "t.tsv")
    assert load_kg(tmp_path / "e.tsv", tmp_path / "t.tsv") == toy_kg


def test_adjacency_symmetric(toy_kg):
    for a in range(toy_kg.n_entities):
        for b, _, _ in neighbors(toy_kg, a):
            assert a in {n for n, _, _ in neighbors(toy_kg, b)}


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 2), st.integers(0, 7)), max_size=25, unique=True))
def test_random_graph_symmetry_and_order(triples):
    triples = [t for t in triples if t[0] != t[2]]
    ents = [(f"e{i}", f"e{i}", ("Product", "Feature", "Need")[i % 3]) for i in range(8)]
    g1 = KnowledgeGraph(ents, ["a", "b", "c"], triples)
    g2 = KnowledgeGraph(ents, ["a", "b", "c"], list(reversed(triples)))
    for a in range(8):
        assert neighbors(g1, a) == neighbors(g2, a)
        for b, _, _ in neighbors(g1, a):
            assert any(n == a for n, _, _ in neighbors(g1, b))


def test_table1_scale_stats():
    ds = generate(GenConfig(n_users=50))
    rep = stats(ds.kg)
    assert (rep.n_entities, rep.n_relations, rep.n_triples) == (77, 7, 282)
    assert rep.type_counts["Product"] == 42
