"""Filter-only recall@k as beta varies, on random unit vectors or fvecs files.

    python scripts/beta_sweep.py --n 20000 --d 128 --factors 0.25 0.5 1 2 4
"""

import argparse

import numpy as np

from ppanns import search
from ppanns.evaluation import brute_force_knn, read_fvecs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base")
    ap.add_argument("--queries")
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--d", type=int, default=128)
    ap.add_argument("--n-queries", type=int, default=200)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--target", type=float, default=0.5)
    ap.add_argument("--factors", type=float, nargs="+", default=[0.25, 0.5, 1, 2, 4])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.base:
        base, queries = read_fvecs(args.base), read_fvecs(args.queries)
    else:
        x = np.random.default_rng(args.seed).standard_normal((args.n + args.n_queries, args.d))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        base, queries = x[:args.n], x[args.n:]
    gt = brute_force_knn(base, queries, args.k)
    tuned = search.tune_beta(base, queries, gt, args.k, args.target, seed=args.seed + 1)
    print(f"tuned beta={tuned.beta:.6g} recall={tuned.recall:.4f} reached={tuned.reached}")
    print("factor,beta,filter_recall")
    for f in args.factors:
        r = search.filter_recall(base, queries, gt, args.k, f * tuned.beta, seed=args.seed + 1)
        print(f"{f:g},{f * tuned.beta:.6g},{r:.4f}")


if __name__ == "__main__":
    main()
