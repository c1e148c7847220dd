"""NN-descent against the exact kNN graph on noisy curves: recall, build time,
and agreement of the top diffusion results, for a sweep over the sampling rate rho.

    python3 scripts/nn_descent_benchmark.py --n 5000 --rho 0.3 0.5 1.0
"""

import argparse
import time

from manifold_rank.diffuse import PoolingSpec, build_query_vector, rank
from manifold_rank.graph import build_affinity, exact_knn, knn_recall, nn_descent_knn, normalize
from manifold_rank.synth import generate_curves


def top_orders(g, ds, Q, top):
    return [rank(g, ds, build_query_vector(ds, q, 10), PoolingSpec("sum")).order[:top] for q in Q]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--k", type=int, default=20)
    ap.add_argument("--rho", type=float, nargs="+", default=[0.1, 0.3, 0.5, 1.0])
    ap.add_argument("--queries", type=int, default=100)
    ap.add_argument("--top", type=int, default=20)
    ap.add_argument("--alpha", type=float, default=0.99)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    curves = generate_curves(n=args.n, d=args.d, seed=args.seed)
    ds = curves.ds
    nn_descent_knn(ds, args.k)  # JIT warm-up
    t0 = time.perf_counter()
    exact = exact_knn(ds, args.k)
    t_exact = time.perf_counter() - t0
    Q, _ = curves.sample(args.queries, seed=args.seed + 7)
    ref = top_orders(normalize(build_affinity(exact), args.alpha), ds, Q, args.top)

    print(f"n={args.n} d={args.d} k={args.k}; exact build {t_exact:.2f}s")
    print(f"  {'rho':>5} {'recall':>8} {'build s':>8} {'same top-' + str(args.top):>12} {'same set':>9}")
    for rho in args.rho:
        t0 = time.perf_counter()
        approx = nn_descent_knn(ds, args.k, rho=rho, seed=args.seed)
        t = time.perf_counter() - t0
        got = top_orders(normalize(build_affinity(approx), args.alpha), ds, Q, args.top)
        same = sum(a == b for a, b in zip(ref, got))
        same_set = sum(set(a) == set(b) for a, b in zip(ref, got))
        print(f"  {rho:5.2f} {knn_recall(approx, exact):8.4f} {t:8.2f} {same:12d} {same_set:9d}")


if __name__ == "__main__":
    main()
