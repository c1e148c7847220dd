"""Retrieval experiments on the planted-object regional benchmark.

Experiments (pick with --experiment, default all):
  baselines   global kNN, AQE and diffusion with sum / GMP pooling
  compaction  GMM compaction sweep over the number of components G
  truncation  re-ranking a kNN shortlist of varying size
  sizes       per-object-size precision, kNN baseline vs diffusion

    python3 scripts/regional_benchmark.py --experiment baselines compaction
"""

import argparse
import time

import numpy as np

from manifold_rank.compact import GmmSpec, compact_dataset
from manifold_rank.diffuse import (
    PoolingSpec,
    aggregate_query,
    aqe_baseline,
    build_query_vector,
    global_descriptors,
    index_gmp_weights,
    knn_order,
    rank,
    rerank_truncated,
)
from manifold_rank.evaluation import average_precision, mean_average_precision, rank_gain_report
from manifold_rank.graph import build_affinity, exact_knn, normalize
from manifold_rank.solver import SolveOptions
from manifold_rank.synth import TRUNCATION_SPEC, RegionalSpec, generate_regional_benchmark

EXPERIMENTS = ("baselines", "compaction", "truncation", "sizes")


def score(bench, orders):
    return 100 * mean_average_precision(average_precision(orders[q], bench.gt[q]) for q in bench.queries)


def diffusion(bench, ds, k, k_query, pooling, alpha, shortlist=0):
    """Per-query orders and mean query time in ms."""
    t0 = time.perf_counter()
    a = build_affinity(exact_knn(ds, k))
    build = time.perf_counter() - t0
    g = normalize(a, alpha)
    w = index_gmp_weights(ds, pooling.lam)
    glob = global_descriptors(ds) if shortlist else None
    orders, times = {}, []
    for qid, Q in bench.queries.items():
        t0 = time.perf_counter()
        y = build_query_vector(ds, Q, k_query)
        if shortlist:
            res = rerank_truncated(a, ds, knn_order(glob, Q), shortlist, y, pooling, alpha, SolveOptions(), w)
        else:
            res = rank(g, ds, y, pooling, SolveOptions(), w)
        times.append(time.perf_counter() - t0)
        orders[qid] = res.order
    return orders, 1e3 * float(np.mean(times)), build


def knn_orders(bench):
    glob = global_descriptors(bench.ds)
    return {q: knn_order(glob, Q) for q, Q in bench.queries.items()}


def run_baselines(args):
    bench = generate_regional_benchmark(RegionalSpec(seed=args.seed))
    glob = global_descriptors(bench.ds)
    print(f"{len(bench.ds.items)} items, {bench.ds.n} regions, {len(bench.queries)} queries")
    print(f"  {'method':<22} {'mAP':>6}")
    print(f"  {'global kNN':<22} {score(bench, knn_orders(bench)):6.2f}")
    aqe = {q: aqe_baseline(glob, aggregate_query(Q), args.aqe_top_n).order for q, Q in bench.queries.items()}
    print(f"  {'AQE top-' + str(args.aqe_top_n):<22} {score(bench, aqe):6.2f}")
    for pooling in (PoolingSpec("sum"), PoolingSpec("gmp", args.lam)):
        orders, ms, _ = diffusion(bench, bench.ds, args.k, args.k, pooling, args.alpha)
        print(f"  {'diffusion ' + pooling.mode:<22} {score(bench, orders):6.2f}   ({ms:.1f} ms/query)")


def run_compaction(args):
    bench = generate_regional_benchmark(RegionalSpec(seed=args.seed))
    per_item = bench.ds.n / len(bench.ds.items)
    seeds = args.gmm_seeds
    print(f"GMM seeds {seeds}; mAP shown as mean [min, max]")
    print(f"  {'G':>4} {'nodes':>7} {'k':>4} {'mAP':>22} {'ms/query':>9}")
    orders, ms, _ = diffusion(bench, bench.ds, args.k, args.k, PoolingSpec("gmp", args.lam), args.alpha)
    print(f"  {'full':>4} {bench.ds.n:7d} {args.k:4d} {score(bench, orders):22.2f} {ms:9.1f}")
    for G in args.components:
        maps, times = [], []
        for seed in seeds:
            ds = compact_dataset(bench.ds, GmmSpec(G, seed=seed))
            # scale neighbor counts with the number of nodes per item
            k = max(5, round(args.k * (ds.n / len(ds.items)) / per_item))
            orders, ms, _ = diffusion(bench, ds, k, k, PoolingSpec("gmp", args.lam), args.alpha)
            maps.append(score(bench, orders))
            times.append(ms)
        cell = f"{np.mean(maps):.2f} [{min(maps):.2f}, {max(maps):.2f}]"
        print(f"  {G:4d} {ds.n:7d} {k:4d} {cell:>22} {np.mean(times):9.1f}")


def run_truncation(args):
    bench = generate_regional_benchmark(TRUNCATION_SPEC)
    k = 25
    full, ms, _ = diffusion(bench, bench.ds, k, k, PoolingSpec("gmp", args.lam), args.alpha)
    print(f"{len(bench.ds.items)} items, {len(bench.queries)} queries, k={k}")
    print(f"  {'shortlist':>9} {'mAP':>6} {'top-10 overlap':>15} {'ms/query':>9}")
    print(f"  {'full':>9} {score(bench, full):6.2f} {10.0:15.2f} {ms:9.1f}")
    for size in args.shortlists:
        short, ms, _ = diffusion(bench, bench.ds, k, k, PoolingSpec("gmp", args.lam), args.alpha, shortlist=size)
        overlap = np.mean([len(set(full[q][:10]) & set(short[q][:10])) for q in bench.queries])
        print(f"  {size:9d} {score(bench, short):6.2f} {overlap:15.2f} {ms:9.1f}")


def run_sizes(args):
    bench = generate_regional_benchmark(RegionalSpec(seed=args.seed))
    base = knn_orders(bench)
    diff, _, _ = diffusion(bench, bench.ds, args.k, args.k, PoolingSpec("gmp", args.lam), args.alpha)
    ids = list(bench.queries)
    report = rank_gain_report([base[q] for q in ids], [diff[q] for q in ids], [bench.gt[q] for q in ids], bench.size_of)
    print(report.to_csv(), end="")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--experiment", nargs="+", choices=EXPERIMENTS, default=list(EXPERIMENTS))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--k", type=int, default=100)
    ap.add_argument("--alpha", type=float, default=0.99)
    ap.add_argument("--lam", type=float, default=1.0)
    ap.add_argument("--aqe-top-n", type=int, default=10)
    ap.add_argument("--components", type=int, nargs="+", default=[1, 2, 3, 5, 8])
    ap.add_argument("--gmm-seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--shortlists", type=int, nargs="+", default=[25, 50, 100, 200, 400])
    args = ap.parse_args()
    for name in args.experiment:
        print(f"== {name}")
        globals()[f"run_{name}"](args)


if __name__ == "__main__":
    main()
