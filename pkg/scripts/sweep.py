"""Sparsity sweep: NDCG and Recall@3 as the fraction eta of training users grows.

    python3 scripts/sweep.py --etas 0.1 0.2 0.5 1.0 --epochs 5
"""
import argparse
import logging

from dcdir.synth import GenConfig, generate
from dcdir.train import TrainConfig, sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lambda", dest="lam", type=float, default=0.9)
    ap.add_argument("--etas", type=float, nargs="+", default=[0.1, 0.2, 0.5, 1.0])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    ds = generate(GenConfig(cross_domain_signal=args.lam))
    rows = sweep(ds, TrainConfig(epochs=args.epochs, seed=args.seed), args.etas)
    print("eta\ttrain_interactions\tndcg\trecall_at_3\tn_test_users")
    for rep, n in rows:
        print(f"{rep.eta:g}\t{n}\t{rep.ndcg:.4f}\t{rep.recall_at_3:.4f}\t{rep.n_users}")


if __name__ == "__main__":
    main()
