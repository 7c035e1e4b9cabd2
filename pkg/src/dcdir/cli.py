"""Command line entry point: ``dcdir <command> [flags]``.

Errors go to stderr as one JSON line ``{"error": kind, "message": text}``
with a nonzero exit status (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .paths import SCHEMAS, enumerate_paths, format_path, score_paths, top_k
from .synth import DataError, desk_config, full_config, generate, load, save, split
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, sweep, train
from .transd import TransDConfig, load_table, pretrain, save_table

log = logging.getLogger("dcdir")

KG_TABLE = "kg_table.tsv"
REPORT_HEADER = "eta\tndcg\trecall_at_3\tn_test_users"

DATA_FORMAT = """\
data directory (TSV, '#' lines are comments):
  entities.tsv             key, name, type (Product|Feature|Need)
  triples.tsv              head key, relation name, tail key
  target_interactions.tsv  user, product key, t (1-based, chronological)
  source_interactions.tsv  user, source item id, t
  descriptions.tsv         source item id, space-separated tokens
  overlap_users.tsv        user
  manifest.json            generator config, seed and counts"""

CKPT_FORMAT = """\
checkpoint directory:
  params.npz     parameter values and Adam moments, plus word vectors
  manifest.json  config snapshot, seed, step, entity keys, vocabulary, history"""

KG_FORMAT = f"""\
KG checkpoint directory:
  {KG_TABLE}   key, kind (e|ep|r|rp), space-separated floats
  manifest.json  TransD config and loss history"""

REPORT_FORMAT = f"""\
report: TSV with header '{REPORT_HEADER}', one row per eta;
a sibling '<report>.manifest.json' records the effective config and seed."""


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind, self.code = kind, code


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", 2)


def _write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _need_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError("missing_file", f"{what} directory not found: {p}")
    return p


def _load_data(path) -> object:
    d = _need_dir(path, "data")
    try:
        return load(d)
    except FileNotFoundError as exc:
        raise CliError("missing_file", str(exc)) from exc
    except DataError as exc:
        raise CliError("bad_data", str(exc)) from exc


def _load_ckpt(path):
    d = _need_dir(path, "checkpoint")
    if not (d / "manifest.json").is_file() or not (d / "params.npz").is_file():
        raise CliError("missing_file", f"not a checkpoint directory: {d}")
    return load_checkpoint(d)


def _train_config(args) -> TrainConfig:
    """Defaults, then ``--config`` JSON, then explicit flags."""
    values = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise CliError("missing_file", f"config file not found: {p}")
        values.update(json.loads(p.read_text(encoding="utf-8")))
    flag_map = {"eta": "eta", "variant": "variant", "k": "k", "strategy": "path_strategy",
                "seed": "seed", "epochs": "epochs"}
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    return TrainConfig.from_dict(values)


def _report(rows, path: Path, manifest: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER + "\n")
        for r in rows:
            fh.write(r.row() + "\n")
    _write_json(Path(str(path) + ".manifest.json"), manifest)
    for r in rows:
        print(f"eta={r.eta:g} ndcg={r.ndcg:.4f} recall@3={r.recall_at_3:.4f} users={r.n_users}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    make = full_config if args.scale == "full" else desk_config
    kw = {"seed": args.seed}
    if args.lam is not None:
        kw["cross_domain_signal"] = args.lam
    cfg = make(**kw)
    ds = generate(cfg)
    save(ds, args.out)
    print(f"wrote {args.out}: {len(ds.target)} users, {ds.kg.n_entities} entities, {len(ds.kg.triples)} triples")


def cmd_pretrain_kg(args):
    ds = _load_data(args.data)
    kw = {k: v for k, v in (("epochs", args.epochs), ("dim", args.dim)) if v is not None}
    cfg = TransDConfig(**kw, seed=args.seed)
    table = pretrain(ds.kg, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_table(table, out / KG_TABLE)
    _write_json(out / "manifest.json", {"config": asdict(cfg), "seed": cfg.seed, "data": str(args.data),
                                        "loss_history": table.loss_history})
    print(f"wrote {out}: final margin loss {table.loss_history[-1]:.4f}")


def cmd_train(args):
    ds = _load_data(args.data)
    cfg = _train_config(args)
    kg = _need_dir(args.kg_ckpt, "KG checkpoint")
    if not (kg / KG_TABLE).is_file():
        raise CliError("missing_file", f"{kg / KG_TABLE} not found")
    table = load_table(kg / KG_TABLE)
    if table.entity_keys != ds.kg.keys:
        raise CliError("mismatch", "KG checkpoint entities do not match the dataset")
    if table.dim != cfg.dim:
        raise CliError("mismatch", f"KG checkpoint dim {table.dim} != config dim {cfg.dim}")
    state = train(ds, cfg, table=table)
    save_checkpoint(state, args.out, extra={"seed": cfg.seed, "data": str(args.data), "kg_ckpt": str(args.kg_ckpt)})
    best = state.history.get("best_epoch")
    print(f"wrote {args.out}: {state.step} steps, best epoch {best}")


def cmd_eval(args):
    state = _load_ckpt(args.ckpt)
    ds = _load_data(args.data)
    cfg = state.config
    sp = split(ds, cfg.cold_start_fraction, cfg.eta, cfg.seed)
    report = evaluate(state, ds, sp.test_truth, cfg)
    _report([report], Path(args.report), {"config": asdict(cfg), "seed": cfg.seed, "ckpt": str(args.ckpt),
                                          "data": str(args.data)})


def cmd_sweep(args):
    ds = _load_data(args.data)
    cfg = _train_config(args)
    try:
        etas = [float(x) for x in args.etas.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError("usage", f"--etas must be comma-separated numbers: {args.etas}", 2) from exc
    if not etas or any(not 0.0 < e <= 1.0 for e in etas):
        raise CliError("usage", f"--etas values must lie in (0, 1]: {args.etas}", 2)
    table = None
    if args.kg_ckpt:
        table = load_table(_need_dir(args.kg_ckpt, "KG checkpoint") / KG_TABLE)
    rows = sweep(ds, cfg, etas, table)
    _report([r for r, _ in rows], Path(args.report),
            {"config": asdict(cfg), "seed": cfg.seed, "data": str(args.data), "etas": etas,
             "training_interactions": [n for _, n in rows]})


def cmd_explain_paths(args):
    state = _load_ckpt(args.ckpt)
    ds = _load_data(args.data)
    g = ds.kg
    if args.user not in ds.target:
        raise CliError("lookup", f"unknown user {args.user}")
    if args.item not in g.key_index or args.item not in {g.keys[p] for p in g.products}:
        raise CliError("lookup", f"unknown target product {args.item}")
    history = [g.entity(k) for k in ds.target[args.user]]
    ps = enumerate_paths(g, history, g.entity(args.item), SCHEMAS, user=args.user,
                         cap=state.config.max_paths)
    if not ps.paths:
        print(f"no schema paths from {args.user}'s history to {args.item}", file=sys.stderr)
        return
    k = args.k if args.k is not None else state.config.k
    for p in top_k(score_paths(ps, state.table), k).paths:
        print(format_path(g, p))


# ---------------------------------------------------------------- parser


def _add_train_flags(p, with_kg_required: bool):
    p.add_argument("--data", required=True, help="dataset directory (see format below)")
    p.add_argument("--kg-ckpt", required=with_kg_required, default=None,
                   help="pretrained KG checkpoint directory from pretrain-kg")
    p.add_argument("--config", help="JSON file of training config keys; flags override it")
    p.add_argument("--variant", choices=("full", "v1", "v2"), help="model variant (default full)")
    p.add_argument("--k", type=int, help="paths kept per (user, item) pair (default 20)")
    p.add_argument("--strategy", choices=("topk", "random"), help="path selection (default topk)")
    p.add_argument("--seed", type=int, help="seed for splits, init and sampling (default 0)")
    p.add_argument("--epochs", type=int, help="training epochs (default from config)")


def build_parser() -> argparse.ArgumentParser:
    root = Parser(prog="dcdir", description="Cross-domain insurance recommendation pipeline.",
                  formatter_class=argparse.RawDescriptionHelpFormatter)
    root.add_argument("--version", action="version", version=__version__)
    root.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = root.add_subparsers(dest="command", parser_class=Parser, metavar="COMMAND")
    sub.required = True
    raw = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen-data", help="write a synthetic dataset", epilog="output " + DATA_FORMAT,
                       formatter_class=raw)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--lambda", dest="lam", type=float, help="cross-domain signal in [0, 1] (default 0.9)")
    p.add_argument("--scale", choices=("desk", "full"), default="desk", help="desk: 2,000 users; full: 21,016")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-kg", help="TransD pretraining of the knowledge graph",
                       epilog="input " + DATA_FORMAT + "\n\noutput " + KG_FORMAT, formatter_class=raw)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output KG checkpoint directory")
    p.add_argument("--epochs", type=int, help="TransD epochs (default 200)")
    p.add_argument("--dim", type=int, help="embedding dimension; must match the training config (default 50)")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    p.set_defaults(func=cmd_pretrain_kg)

    p = sub.add_parser("train", help="joint training; writes a checkpoint",
                       epilog="input " + DATA_FORMAT + "\n\n" + KG_FORMAT + "\n\noutput " + CKPT_FORMAT,
                       formatter_class=raw)
    _add_train_flags(p, with_kg_required=True)
    p.add_argument("--out", required=True, help="output checkpoint directory")
    p.add_argument("--eta", type=float, help="fraction of non-test users used for training (default 1.0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cold-start evaluation of a checkpoint",
                       epilog=CKPT_FORMAT + "\n\n" + REPORT_FORMAT, formatter_class=raw)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory the checkpoint was trained on")
    p.add_argument("--report", required=True, help="output metrics TSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate once per eta",
                       epilog="input " + DATA_FORMAT + "\n\n" + REPORT_FORMAT, formatter_class=raw)
    _add_train_flags(p, with_kg_required=False)
    p.add_argument("--etas", default="0.1,0.2,0.5,1.0", help="comma-separated eta values")
    p.add_argument("--report", required=True, help="output metrics TSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("explain-paths", help="print the scored top-K paths for a user and item",
                       epilog="prints one line per path: score<TAB>entity -[relation]- entity ...",
                       formatter_class=raw)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--user", required=True, help="user id")
    p.add_argument("--item", required=True, help="target product key")
    p.add_argument("--k", type=int, help="paths to print (default: checkpoint K)")
    p.set_defaults(func=cmd_explain_paths)
    return root


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return 0
    except CliError as exc:
        kind, code, msg = exc.kind, exc.code, str(exc)
    except FileNotFoundError as exc:
        kind, code, msg = "missing_file", 1, str(exc)
    except (ValueError, KeyError) as exc:
        kind, code, msg = type(exc).__name__, 1, str(exc)
    print(json.dumps({"error": kind, "message": " ".join(msg.split())}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
