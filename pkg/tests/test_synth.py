import filecmp
import json

import numpy as np
import pytest

from dcdir.autodiff import ConfigError
from dcdir.kg import stats
from dcdir.source import WordConfig, train_word_vectors
from dcdir.synth import (DataError, GenConfig, audit_split, full_config, generate, load, save, split)
from dcdir.train import Encoded, rank_cases


def test_counts_match_config():
    cfg = GenConfig(n_users=300, seed=2)
    ds = generate(cfg)
    rep = stats(ds.kg)
    assert rep.n_entities == cfg.n_kg_entities and rep.n_relations == cfg.n_relations
    assert rep.n_triples == cfg.n_triples and rep.type_counts["Product"] == cfg.n_target_items
    assert len(ds.descriptions) == cfg.n_source_items and len(ds.target) == cfg.n_users
    c = ds.manifest["counts"]
    assert c["kg_triples"] == 282 and c["overlapped_users"] == 300


def test_alternative_budgets():
    ds = generate(GenConfig(n_users=10, n_target_items=10, n_kg_entities=30, n_triples=90, n_preference_clusters=3))
    rep = stats(ds.kg)
    assert (rep.n_entities, rep.n_triples, rep.type_counts["Product"]) == (30, 90, 10)


@pytest.mark.parametrize("kw", [dict(n_triples=10), dict(n_kg_entities=45), dict(cross_domain_signal=1.5),
                                dict(n_relations=2), dict(target_history_length=(1, 3)), dict(n_triples=100_000)])
def test_infeasible_configs(kw):
    with pytest.raises(ConfigError):
        generate(GenConfig(n_users=5, **kw))


def test_timestamps_and_references():
    ds = generate(GenConfig(n_users=100))
    keys = set(ds.kg.keys)
    for u, seq in ds.target.items():
        assert seq and set(seq) <= keys and len(set(seq)) == len(seq)
    for u, seq in ds.source.items():
        assert seq and set(seq) <= set(ds.descriptions)


def test_independent_clusters_at_zero_signal():
    ds = generate(GenConfig(cross_domain_signal=0.0, n_users=1000, seed=0))
    a = np.array([ds.clusters[u] for u in sorted(ds.clusters)], dtype=float)
    assert abs(np.corrcoef(a[:, 0], a[:, 1])[0, 1]) < 0.05
    # agreement rate should sit near chance, 1/C; 4 standard errors of slack
    C = ds.manifest["generator"]["n_preference_clusters"]
    agree = np.mean(a[:, 0] == a[:, 1])
    assert abs(agree - 1 / C) < 4 * np.sqrt((1 / C) * (1 - 1 / C) / 1000)


def test_cheat_classifier_at_full_signal():
    """Knowing the true cluster ranks the held-out item in the top 3 almost always."""
    ds = generate(GenConfig(cross_domain_signal=1.0))
    sp = split(ds, 0.3, 1.0, 0)
    C = ds.manifest["generator"]["n_preference_clusters"]
    # the generator assigns the k-th product to cluster k mod C
    prod_cluster = {p: k % C for k, p in enumerate(ds.kg.products)}
    enc = Encoded(ds, train_word_vectors(list(ds.descriptions.values()), WordConfig(dim=4, epochs=0)))
    jitter = np.random.default_rng(0)

    def score(users):
        out = np.zeros((len(users), ds.kg.n_entities))
        for i, u in enumerate(users):
            for p, c in prod_cluster.items():
                out[i, p] = float(c == ds.clusters[u][1]) + 1e-3 * jitter.random()
        return out

    rep = rank_cases(score, enc, sp.test_truth, 9, 0)
    assert rep.recall_at_3 > 0.9


def test_round_trip(tmp_path):
    ds = generate(GenConfig(n_users=60, seed=4))
    save(ds, tmp_path)
    back = load(tmp_path)
    assert back == ds
    assert back.manifest["generator"]["seed"] == 4


def test_byte_identical_outputs(tmp_path):
    for d in ("a", "b"):
        save(generate(GenConfig(n_users=40, seed=9)), tmp_path / d)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors and len(match) == len(names)


def test_unknown_item_names_row(tmp_path):
    save(generate(GenConfig(n_users=10)), tmp_path)
    with open(tmp_path / "target_interactions.tsv", "a") as fh:
        fh.write("u0\tP999\t99\n")
    with pytest.raises(DataError, match=r"target_interactions.tsv:\d+"):
        load(tmp_path)


def test_non_monotone_timestamps(tmp_path):
    save(generate(GenConfig(n_users=10)), tmp_path)
    path = tmp_path / "source_interactions.tsv"
    lines = path.read_text().splitlines()
    u, item, t = lines[1].split("\t")
    lines.insert(2, f"{u}\t{item}\t{t}")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="timestamp"):
        load(tmp_path)


def test_missing_file(tmp_path):
    save(generate(GenConfig(n_users=10)), tmp_path)
    (tmp_path / "descriptions.tsv").unlink()
    with pytest.raises(DataError, match="descriptions.tsv"):
        load(tmp_path)


# ---------------------------------------------------------------- splits


@pytest.fixture(scope="module")
def ds500():
    return generate(GenConfig(n_users=500, seed=1))


def test_split_full_eta(ds500):
    sp = split(ds500, 0.3, 1.0, 0)
    assert len(sp.test_users) == 150
    assert set(sp.train_users) == set(ds500.overlap) - set(sp.test_users)
    assert not set(sp.test_users) & set(sp.train_users)
    assert audit_split(ds500, sp) == []


def test_split_nested_and_monotone(ds500):
    sizes, prev = [], set()
    for eta in (0.1, 0.2, 0.5, 1.0):
        sp = split(ds500, 0.3, eta, 0)
        cur = set(sp.train_users)
        assert prev <= cur
        prev = cur
        sizes.append(sum(len(s) for s in sp.train_target.values()))
        assert split(ds500, 0.3, eta, 0).test_users == sp.test_users
    assert sizes == sorted(sizes)


def test_split_protocol(ds500):
    sp = split(ds500, 0.3, 1.0, 0)
    for u in sp.test_users:
        assert u not in sp.train_target and u not in sp.validation
        assert sp.test_truth[u] == ds500.target[u][-1]
    for u in sp.train_users:
        assert sp.train_target[u] + [sp.validation[u]] == ds500.target[u]


def test_split_deterministic(ds500):
    a, b = split(ds500, 0.3, 0.5, 7), split(ds500, 0.3, 0.5, 7)
    assert a == b
    assert split(ds500, 0.3, 0.5, 8).test_users != a.test_users


def test_split_bad_fractions(ds500):
    for kw in (dict(cold_start_fraction=0.0), dict(cold_start_fraction=1.0), dict(eta=0.0), dict(eta=1.2)):
        with pytest.raises(ConfigError):
            split(ds500, **kw)


def test_audit_catches_leak(ds500):
    sp = split(ds500, 0.3, 1.0, 0)
    leaked = sp.test_users[0]
    sp.train_target[leaked] = ds500.target[leaked][:-1]
    assert audit_split(ds500, sp)


def test_full_scale_split_sizes():
    ds = generate(full_config())
    sp = split(ds)
    n = len(ds.overlap)
    assert n == 21016
    assert len(sp.test_users) == round(0.3 * n)
    assert len(sp.train_users) == n - len(sp.test_users) == len(sp.validation)
    assert json.loads(json.dumps(ds.manifest))["counts"]["source_items"] == 3836
