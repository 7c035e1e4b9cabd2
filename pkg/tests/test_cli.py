import json

import pytest

from dcdir.cli import REPORT_HEADER, _train_config, build_parser, main
from dcdir.kg import load_toy
from dcdir.synth import GenConfig, generate, save


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error(err):
    line = err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain-kg -> train on a small dataset."""
    root = tmp_path_factory.mktemp("cli")
    save(generate(GenConfig(n_users=200, seed=3)), root / "data")
    (root / "cfg.json").write_text(json.dumps({"dim": 16, "word_epochs": 2, "epochs": 1}))
    assert main(["pretrain-kg", "--data", str(root / "data"), "--out", str(root / "kg"), "--epochs", "10",
                 "--dim", "16"]) == 0
    assert main(["train", "--data", str(root / "data"), "--kg-ckpt", str(root / "kg"), "--out", str(root / "ck"),
                 "--config", str(root / "cfg.json")]) == 0
    return root


def test_gen_data_writes_dataset(tmp_path, capsys):
    code, out, _ = _run(["gen-data", "--out", tmp_path / "d", "--seed", 5, "--lambda", 0.5], capsys)
    assert code == 0 and "2000 users" in out
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["generator"]["cross_domain_signal"] == 0.5 and manifest["generator"]["seed"] == 5


def test_pretrain_kg_outputs(pipeline):
    assert (pipeline / "kg" / "kg_table.tsv").is_file()
    m = json.loads((pipeline / "kg" / "manifest.json").read_text())
    assert len(m["loss_history"]) == 11  # initial loss plus one per epoch


def test_train_writes_checkpoint(pipeline):
    m = json.loads((pipeline / "ck" / "manifest.json").read_text())
    assert m["config"]["dim"] == 16 and m["seed"] == 0 and (pipeline / "ck" / "params.npz").is_file()


def test_eval_report_and_repeatability(pipeline, capsys):
    texts = []
    for name in ("r1.tsv", "r2.tsv"):
        code, out, _ = _run(["eval", "--ckpt", pipeline / "ck", "--data", pipeline / "data",
                             "--report", pipeline / name], capsys)
        assert code == 0 and "ndcg=" in out
        texts.append((pipeline / name).read_text())
    assert texts[0] == texts[1]
    lines = texts[0].splitlines()
    assert lines[0] == REPORT_HEADER and len(lines) == 2
    eta, ndcg, recall, n = lines[1].split("\t")
    assert float(eta) == 1.0 and 0.0 < float(ndcg) <= 1.0 and 0.0 <= float(recall) <= 1.0 and int(n) == 60
    side = json.loads((pipeline / "r1.tsv.manifest.json").read_text())
    assert side["seed"] == 0 and side["config"]["dim"] == 16


def test_explain_paths(pipeline, capsys):
    from dcdir.synth import load
    ds = load(pipeline / "data")
    g = ds.kg
    user = sorted(ds.target)[0]
    item = next(g.keys[p] for p in g.products if g.keys[p] not in ds.target[user])
    code, out, _ = _run(["explain-paths", "--ckpt", pipeline / "ck", "--data", pipeline / "data",
                         "--user", user, "--item", item, "--k", 3], capsys)
    assert code == 0
    lines = out.splitlines()
    assert 0 < len(lines) <= 3
    types = {g.names[e]: g.types[e].value[0] for e in range(g.n_entities)}
    scores = []
    for line in lines:
        score, chain = line.split("\t")
        scores.append(float(score))
        names = [part.split("]- ")[-1] for part in chain.split(" -[")]
        assert names[-1] == g.names[g.entity(item)] and "".join(types[n] for n in names) in ("PFNFP", "PNFNP")
    assert scores == sorted(scores, reverse=True)


def test_explain_unknown_user(pipeline, capsys):
    code, _, err = _run(["explain-paths", "--ckpt", pipeline / "ck", "--data", pipeline / "data",
                         "--user", "nobody", "--item", "P000"], capsys)
    assert code == 1 and _error(err)["error"] == "lookup"


def test_sweep_command(pipeline, capsys):
    code, _, _ = _run(["sweep", "--data", pipeline / "data", "--kg-ckpt", pipeline / "kg",
                       "--config", pipeline / "cfg.json", "--etas", "0.5,1.0",
                       "--report", pipeline / "sweep.tsv"], capsys)
    assert code == 0
    rows = (pipeline / "sweep.tsv").read_text().splitlines()[1:]
    assert [float(r.split("\t")[0]) for r in rows] == [0.5, 1.0]
    side = json.loads((pipeline / "sweep.tsv.manifest.json").read_text())
    assert side["training_interactions"][0] < side["training_interactions"][1]


def test_bad_etas(pipeline, capsys):
    code, _, err = _run(["sweep", "--data", pipeline / "data", "--etas", "0,2", "--report", pipeline / "x"],
                        capsys)
    assert code == 2 and _error(err)["error"] == "usage"


@pytest.mark.parametrize("cmd", ["gen-data", "pretrain-kg", "train", "eval", "sweep", "explain-paths"])
def test_help_documents_formats(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "usage: dcdir " + cmd in out
    expected = {"gen-data": "entities.tsv", "pretrain-kg": "kg_table.tsv", "train": "params.npz",
                "eval": REPORT_HEADER, "sweep": REPORT_HEADER, "explain-paths": "score<TAB>"}[cmd]
    assert expected in out


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = _run(["eval", "--ckpt", "c", "--data", "d", "--report", "r", "--bogus"], capsys)
    assert code == 2
    e = _error(err)
    assert e["error"] == "usage" and "--bogus" in e["message"]


def test_missing_command(capsys):
    code, _, err = _run([], capsys)
    assert code == 2 and _error(err)["error"] == "usage"


def test_missing_checkpoint(tmp_path, capsys):
    code, _, err = _run(["eval", "--ckpt", tmp_path / "nope", "--data", tmp_path, "--report", tmp_path / "r"],
                        capsys)
    assert code == 1 and _error(err)["error"] == "missing_file"


def test_bad_dataset(tmp_path, capsys):
    save(generate(GenConfig(n_users=10)), tmp_path / "d")
    (tmp_path / "d" / "triples.tsv").unlink()
    code, _, err = _run(["pretrain-kg", "--data", tmp_path / "d", "--out", tmp_path / "kg"], capsys)
    assert code == 1 and _error(err)["error"] == "bad_data"


def test_kg_mismatch(tmp_path, capsys):
    from dcdir.transd import TransDConfig, pretrain, save_table
    save(generate(GenConfig(n_users=10)), tmp_path / "d")
    (tmp_path / "kg").mkdir()
    save_table(pretrain(load_toy(), TransDConfig(epochs=1)), tmp_path / "kg" / "kg_table.tsv")
    code, _, err = _run(["train", "--data", tmp_path / "d", "--kg-ckpt", tmp_path / "kg", "--out", tmp_path / "c"],
                        capsys)
    assert code == 1 and _error(err)["error"] == "mismatch"


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"k": 7, "epochs": 3, "lr": 0.01}))
    parser = build_parser()
    args = parser.parse_args(["train", "--data", "d", "--kg-ckpt", "k", "--out", "o", "--config", str(cfg_file),
                              "--epochs", "5"])
    cfg = _train_config(args)
    assert (cfg.epochs, cfg.k, cfg.lr, cfg.dim) == (5, 7, 0.01, 50)


def test_unknown_config_key(tmp_path, capsys):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"learning_rate": 1}))
    save(generate(GenConfig(n_users=10)), tmp_path / "d")
    code, _, err = _run(["sweep", "--data", tmp_path / "d", "--config", cfg_file, "--report", tmp_path / "r"],
                        capsys)
    assert code == 1 and "learning_rate" in _error(err)["message"]
