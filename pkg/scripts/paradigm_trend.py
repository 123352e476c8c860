"""Full model vs single-branch ablations on the default synthetic split.

Prints per-seed Seen@Seen and Unseen@All mAP (selected branch) for
lambda = (4,1,1), (4,0,0) and (0,1,0), plus win counts.

    python scripts/paradigm_trend.py --seeds 0 1 2 --epochs 100
"""

import argparse
import time

from unihash.cli import run_evaluation
from unihash.config import RunConfig
from unihash.dataset import generate_synthetic, split_seen_unseen
from unihash.training import train

VARIANTS = {"full": (4, 1, 1), "center_only": (4, 0, 0), "pairwise_only": (0, 1, 0)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--spread", type=float, default=None, help="override data spread")
    args = ap.parse_args()

    base = RunConfig()
    if args.spread is not None:
        base.data.spread = args.spread
    d = base.data
    ds = generate_synthetic(d.classes, d.dim, d.per_class, d.spread, d.seed)
    split = split_seen_unseen(ds, d.seen_ratio, d.split_seed)

    unseen_wins = seen_wins = 0
    print("seed,variant,selected,tau2,seen@seen,unseen@all,unseen@unseen,seconds")
    for seed in args.seeds:
        res = {}
        for name, w in VARIANTS.items():
            cfg = RunConfig(data=d)
            cfg.train.lambda1, cfg.train.lambda2, cfg.train.lambda3 = map(float, w)
            cfg.train.seed, cfg.train.epochs = seed, args.epochs
            t0 = time.perf_counter()
            ckpt, log = train(cfg.train_config(ds.feature_dim), split)
            rep = run_evaluation(cfg, ckpt, ds, split)
            p = rep.protocols
            res[name] = p
            print(f"{seed},{name},{rep.selected_branch},{log[-1].tau2:.5f},{p['seen@seen'].map_selected:.4f},"
                  f"{p['unseen@all'].map_selected:.4f},{p['unseen@unseen'].map_selected:.4f},"
                  f"{time.perf_counter() - t0:.1f}", flush=True)
        unseen_wins += res["full"]["unseen@all"].map_selected >= res["center_only"]["unseen@all"].map_selected
        seen_wins += res["full"]["seen@seen"].map_selected >= res["pairwise_only"]["seen@seen"].map_selected
    n = len(args.seeds)
    print(f"unseen@all full >= center_only: {unseen_wins}/{n}")
    print(f"seen@seen full >= pairwise_only: {seen_wins}/{n}")


if __name__ == "__main__":
    main()
