"""Final tau^2 (branch disagreement) as a function of the mutual-loss weight lambda3.

    python scripts/consistency_sweep.py --lambda3 0 0.25 1 4 --seeds 0 1
"""

import argparse

from unihash.config import RunConfig
from unihash.dataset import generate_synthetic, split_seen_unseen
from unihash.training import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lambda3", type=float, nargs="+", default=[0.0, 0.25, 1.0, 4.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=100)
    args = ap.parse_args()

    d = RunConfig().data
    ds = generate_synthetic(d.classes, d.dim, d.per_class, d.spread, d.seed)
    split = split_seen_unseen(ds, d.seen_ratio, d.split_seed)
    print("seed,lambda3,tau2_final,loss_final")
    for seed in args.seeds:
        for l3 in args.lambda3:
            cfg = RunConfig()
            cfg.train.lambda3, cfg.train.seed, cfg.train.epochs = l3, seed, args.epochs
            _, log = train(cfg.train_config(ds.feature_dim), split)
            print(f"{seed},{l3},{log[-1].tau2:.6f},{log[-1].loss:.6f}", flush=True)


if __name__ == "__main__":
    main()
