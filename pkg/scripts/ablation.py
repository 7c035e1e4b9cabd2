"""Path-module ablations: full model (top-K or random-K paths), attribute mean, 2-hop mean.

    python3 scripts/ablation.py --seeds 0 1 2 --epochs 5
"""
import argparse
import logging

import numpy as np

from dcdir.synth import GenConfig, generate, split
from dcdir.train import TrainConfig, evaluate, train

SETTINGS = [("full", "topk"), ("full", "random"), ("v1", "topk"), ("v2", "topk")]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lambda", dest="lam", type=float, default=0.9)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    ds = generate(GenConfig(cross_domain_signal=args.lam))
    print("variant\tstrategy\tndcg_mean\tndcg_sd\trecall_at_3_mean")
    for variant, strategy in SETTINGS:
        ndcg, recall = [], []
        for seed in args.seeds:
            cfg = TrainConfig(epochs=args.epochs, variant=variant, path_strategy=strategy, seed=seed)
            sp = split(ds, cfg.cold_start_fraction, cfg.eta, seed)
            rep = evaluate(train(ds, cfg, splits=sp), ds, sp.test_truth, cfg)
            ndcg.append(rep.ndcg)
            recall.append(rep.recall_at_3)
        print(f"{variant}\t{strategy}\t{np.mean(ndcg):.4f}\t{np.std(ndcg):.4f}\t{np.mean(recall):.4f}", flush=True)


if __name__ == "__main__":
    main()
