"""Relative residual per iteration for CG and the Jacobi-style iteration.

Writes a long-format CSV (solver, query, iteration, residual) and prints the
median iteration counts needed to reach a few tolerances.

    python3 scripts/solver_convergence.py --out convergence.csv
"""

import argparse
import csv

import numpy as np

from manifold_rank.diffuse import build_query_vector
from manifold_rank.graph import build_affinity, exact_knn, normalize
from manifold_rank.solver import SolveOptions, relative_residual, solve_cg
from manifold_rank.synth import RegionalSpec, generate_regional_benchmark


def jacobi_residuals(g, y, iters):
    """True relative residual after each step of f <- alpha S f + (1 - alpha) y, f0 = y."""
    y = y.to_dense()
    f = y.copy()
    out = [relative_residual(g, f, y)]
    for _ in range(iters):
        f = g.alpha * (g.s_matrix @ f) + (1 - g.alpha) * y
        out.append(relative_residual(g, f, y))
    return out


def first_below(history, tol):
    for i, r in enumerate(history):
        if r <= tol:
            return i
    return None


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="convergence.csv")
    ap.add_argument("--k", type=int, default=100)
    ap.add_argument("--alpha", type=float, default=0.99)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--queries", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    bench = generate_regional_benchmark(RegionalSpec(seed=args.seed))
    g = normalize(build_affinity(exact_knn(bench.ds, args.k)), args.alpha)
    opts = SolveOptions(args.iters, 1e-12)
    histories = {"cg": [], "jacobi": []}
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["solver", "query", "iteration", "residual"])
        for qid, Q in list(bench.queries.items())[: args.queries]:
            y = build_query_vector(bench.ds, Q, args.k)
            runs = {"cg": solve_cg(g, y, opts).residual_history, "jacobi": jacobi_residuals(g, y, args.iters)}
            for name, hist in runs.items():
                histories[name].append(hist)
                w.writerows([name, qid, i, f"{r:.6e}"] for i, r in enumerate(hist))

    print(f"n={bench.ds.n} nodes, k={args.k}, alpha={args.alpha}, {len(histories['cg'])} queries")
    print(f"{'tol':>8} {'cg':>8} {'jacobi':>8}")
    for tol in (1e-2, 1e-4, 1e-6, 1e-8):
        cells = []
        for name in ("cg", "jacobi"):
            hits = [first_below(h, tol) for h in histories[name]]
            hits = [h for h in hits if h is not None]
            cells.append(f"{np.median(hits):8.0f}" if len(hits) == len(histories[name]) else f"{'>' + str(args.iters):>8}")
        print(f"{tol:8.0e} {cells[0]} {cells[1]}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
