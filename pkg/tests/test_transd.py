import numpy as np
import pytest

from dcdir.autodiff import ConfigError, Parameter
from dcdir.kg import KGLookupError
from dcdir.transd import (Corrupter, TransDConfig, TransDTable, init_table, load_table, pretrain,
                          project_values, save_table, transd_energy)


def _table(E, Ep, R, Rp):
    return TransDTable([str(i) for i in range(len(E))], [str(i) for i in range(len(R))],
                       Parameter("kg.entity", E), Parameter("kg.entity_proj", Ep),
                       Parameter("kg.relation", R), Parameter("kg.relation_proj", Rp))


def test_project_zero_projection(rng):
    e = rng.normal(size=5)
    assert np.array_equal(project_values(e, np.zeros(5), rng.normal(size=5)), e)


def test_project_hand_arithmetic():
    assert np.array_equal(project_values(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])),
                          [1.0, 1.0])


def test_energy_zero_when_translation_exact(rng):
    d = 4
    h, r = rng.normal(size=d), rng.normal(size=d)
    zero = np.zeros((2, d))
    # zero projections leave entities unchanged, so t = h + r gives zero energy
    table = _table(np.stack([h, h + r]), zero, r[None, :], np.zeros((1, d)))
    assert transd_energy(table, (0, 0, 1)) == pytest.approx(0.0, abs=1e-24)


def test_energy_hand_value():
    table = _table(np.zeros((2, 2)), np.zeros((2, 2)), np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    assert transd_energy(table, (0, 0, 1)) == 1.0


def test_energy_rotation_invariant(rng):
    d = 5
    E, Ep = rng.normal(size=(3, d)), rng.normal(size=(3, d))
    R, Rp = rng.normal(size=(2, d)), rng.normal(size=(2, d))
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    a = transd_energy(_table(E, Ep, R, Rp), ([0, 1], [0, 1], [2, 0]))
    b = transd_energy(_table(E @ Q.T, Ep @ Q.T, R @ Q.T, Rp @ Q.T), ([0, 1], [0, 1], [2, 0]))
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_energy_unknown_ids(rng):
    table = _table(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), rng.normal(size=(1, 2)), rng.normal(size=(1, 2)))
    with pytest.raises(KGLookupError):
        transd_energy(table, (0, 3, 1))
    with pytest.raises(KGLookupError):
        transd_energy(table, (0, 0, 9))


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TransDConfig(dim=0)
    with pytest.raises(ConfigError):
        TransDConfig(margin=0.0)


def test_epochs_zero_is_seeded_init(toy_kg):
    a = pretrain(toy_kg, TransDConfig(dim=8, epochs=0, seed=5))
    b = init_table(toy_kg, 8, np.random.default_rng(5))
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.value, q.value)


def _norms_ok(table, g):
    E, Ep, R, Rp = (p.value for p in table.parameters())
    ok = np.all(np.linalg.norm(E, axis=1) <= 1 + 1e-9) and np.all(np.linalg.norm(R, axis=1) <= 1 + 1e-9)
    for h, r, t in g.triples:
        ok &= np.linalg.norm(project_values(E[h], Ep[h], Rp[r])) <= 1 + 1e-9
        ok &= np.linalg.norm(project_values(E[t], Ep[t], Rp[r])) <= 1 + 1e-9
    return bool(ok)


def test_norms_hold_after_every_epoch(toy_kg):
    # the rng stream makes a k-epoch run equal the first k epochs of a longer one
    for k in range(0, 8):
        assert _norms_ok(pretrain(toy_kg, TransDConfig(dim=8, epochs=k, seed=2)), toy_kg)


def test_prefix_property(toy_kg):
    short = pretrain(toy_kg, TransDConfig(dim=8, epochs=3, seed=2))
    long = pretrain(toy_kg, TransDConfig(dim=8, epochs=5, seed=2))
    assert long.loss_history[:4] == short.loss_history


def test_positive_energy_below_corruptions(toy_kg, toy_table):
    corr = Corrupter(toy_kg)
    rng = np.random.default_rng(11)
    pos = np.array(toy_kg.triples)
    wins, total, e_pos, e_neg = 0, 0, [], []
    for trip in toy_kg.triples:
        ep = transd_energy(toy_table, trip)
        for _ in range(10):
            en = transd_energy(toy_table, corr.corrupt(trip, rng))
            wins += ep < en
            total += 1
            e_pos.append(ep)
            e_neg.append(en)
    assert wins / total >= 0.9
    assert np.mean(e_pos) < np.mean(e_neg)
    assert len(pos) == 20


def test_margin_loss_history_shape_and_trend(toy_kg, toy_table):
    hist = toy_table.loss_history
    assert len(hist) == 101
    init = hist[0]
    for a, b in zip(hist[3:], hist[4:]):
        assert b - a <= 0.01 * init


def test_corruptions_type_compatible_and_new(toy_kg):
    corr = Corrupter(toy_kg)
    rng = np.random.default_rng(0)
    known = set(toy_kg.triples)
    for trip in toy_kg.triples:
        for _ in range(5):
            c = corr.corrupt(trip, rng)
            assert c not in known
            assert [toy_kg.types[c[0]], toy_kg.types[c[2]]] == [toy_kg.types[trip[0]], toy_kg.types[trip[2]]]


def test_seeded_determinism(toy_kg):
    a = pretrain(toy_kg, TransDConfig(dim=8, epochs=5, seed=9))
    b = pretrain(toy_kg, TransDConfig(dim=8, epochs=5, seed=9))
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.value.tobytes() == q.value.tobytes()


def test_save_load_exact(toy_table, tmp_path):
    save_table(toy_table, tmp_path / "t.tsv")
    back = load_table(tmp_path / "t.tsv")
    assert back.entity_keys == toy_table.entity_keys and back.relation_names == toy_table.relation_names
    for p, q in zip(back.parameters(), toy_table.parameters()):
        assert np.array_equal(p.value, q.value)
