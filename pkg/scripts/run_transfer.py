"""Cold-start transfer on the desk-scale synthetic data, against random and popularity.

    python3 scripts/run_transfer.py --lambda 0.9 --epochs 5
"""
import argparse
import logging

from dcdir.synth import GenConfig, generate, split
from dcdir.train import Encoded, TrainConfig, evaluate, popularity_scores, random_expectation, rank_cases, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lambda", dest="lam", type=float, default=0.9, help="cross-domain signal")
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    ds = generate(GenConfig(n_users=args.users, cross_domain_signal=args.lam, seed=args.seed))
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    sp = split(ds, cfg.cold_start_fraction, cfg.eta, cfg.seed)
    state = train(ds, cfg, splits=sp)
    enc = Encoded(ds, state.words)
    model = evaluate(state, ds, sp.test_truth, cfg, enc)
    pop = rank_cases(popularity_scores(enc, sp.train_target), enc, sp.test_truth, cfg.eval_negatives, cfg.seed)
    print("scorer\tndcg\trecall_at_3")
    print(f"random\t{random_expectation(cfg.eval_negatives + 1):.4f}\t{3 / (cfg.eval_negatives + 1):.4f}")
    print(f"popularity\t{pop.ndcg:.4f}\t{pop.recall_at_3:.4f}")
    print(f"dcdir\t{model.ndcg:.4f}\t{model.recall_at_3:.4f}")


if __name__ == "__main__":
    main()
