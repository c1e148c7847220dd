"""manifold-rank command line: synth, index, compact, query, eval."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .compact import GmmSpec, compact_dataset
from .core import (
    CapabilityError,
    DescriptorSet,
    FormatError,
    InputError,
    KernelParams,
    ManifoldRankError,
    NumericalError,
    load_descriptors,
    save_descriptors,
)
from .diffuse import (
    PoolingSpec,
    RankingResult,
    aqe_baseline,
    build_query_vector,
    global_descriptors,
    index_gmp_weights,
    knn_order,
    rank,
    rerank_truncated,
)
from .evaluation import GroundTruth, average_precision, mean_average_precision, rank_gain_report
from .graph import build_affinity, exact_knn, knn_recall, load_graph, nn_descent_knn, normalize, save_graph, topk_rows
from .solver import SolveOptions
from .synth import (
    RegionalSpec,
    SyntheticManifoldSpec,
    generate_manifolds,
    generate_regional_benchmark,
    manifold_ground_truth,
    manifold_queries,
    two_crescents,
)


EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERICAL = 0, 1, 2, 3
SOLVER_NAMES = {"cg": "cg", "jacobi": "jacobi_iteration", "dense": "dense_direct"}
DESCRIPTORS_FILE = "descriptors.mrds"
GRAPH_FILE = "graph.mrgr"
MANIFEST_FILE = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return value


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _threads() -> int:
    env = os.environ.get("MANIFOLD_RANK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"MANIFOLD_RANK_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


# --- synth ---------------------------------------------------------------------


def contour_grid(md, query_point, k, alpha, exponent, resolution):
    """Diffusion scores extended to a planar grid: each grid point averages its kNN's scores."""
    params = KernelParams(exponent)
    g = normalize(build_affinity(exact_knn(md.ds, k, params)), alpha)
    q = md.embed(np.asarray(query_point)[None, :])
    y = build_query_vector(md.ds, q, k, params)
    f = rank(g, md.ds, y, PoolingSpec("sum"), SolveOptions(max_iters=1000, rel_tol=1e-8)).point_scores
    lo = md.points.min(axis=0) - 0.25
    hi = md.points.max(axis=0) + 0.25
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    sims = md.ds.data @ md.embed(grid).T
    sims = np.maximum(sims, 0.0) ** exponent
    nn, w = topk_rows(sims.T, k)
    wsum = w.sum(axis=1)
    scores = np.where(wsum > 0, (w * f[nn]).sum(axis=1) / np.where(wsum > 0, wsum, 1), 0.0)
    return grid, scores


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "crescents":
        spec = SyntheticManifoldSpec(
            manifolds=two_crescents(args.n_per_manifold, args.sigma), seed=args.seed, background=args.background
        )
        md = generate_manifolds(spec)
        save_descriptors(md.ds, out / "descriptors.mrds")
        _, qvec, qlab = manifold_queries(spec, args.queries_per_manifold, args.seed + 1)
        qds = DescriptorSet.from_rows(qvec)
        save_descriptors(qds, out / "queries.mrds", with_items=True)
        manifold_ground_truth(md.labels, range(len(qlab)), qlab).save(out / "groundtruth.json")
        if args.contours:
            query_point = args.contour_query
            if query_point is None:
                arc = spec.manifolds[0]
                mid = arc.start + arc.span / 2
                query_point = [arc.center[0] + arc.radius * np.cos(mid), arc.center[1] + arc.radius * np.sin(mid)]
            grid, scores = contour_grid(md, query_point, args.contour_k, args.alpha, args.exponent, args.grid)
            with open(args.contours, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["x", "y", "score"])
                for (x, yv), s in zip(grid.tolist(), scores.tolist()):
                    w.writerow([f"{x:.6f}", f"{yv:.6f}", f"{s:.9e}"])
    else:
        if args.contours:
            raise InputError("--contours is only available for planar crescents")
        bench = generate_regional_benchmark(RegionalSpec(seed=args.seed, queries_per_class=args.queries_per_manifold))
        save_descriptors(bench.ds, out / "descriptors.mrds", with_items=True)
        qids = sorted(bench.queries)
        qdata = np.vstack([bench.queries[q] for q in qids])
        qitems = np.repeat(qids, [len(bench.queries[q]) for q in qids])
        save_descriptors(DescriptorSet.from_rows(qdata, qitems), out / "queries.mrds", with_items=True)
        bench.gt.save(out / "groundtruth.json")
        with open(out / "sizes.json", "w") as fh:
            json.dump({str(k): v for k, v in sorted(bench.size_of.items())}, fh, indent=1)
    print(f"wrote synthetic dataset to {out}")
    return EXIT_OK


# --- index ---------------------------------------------------------------------


def cmd_index(args) -> int:
    ds = load_descriptors(args.descriptors)
    params = KernelParams(args.exponent)
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    if args.k >= ds.n:
        raise InputError(f"--k {args.k} must be smaller than the number of descriptors ({ds.n})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    builder = {"name": args.builder}
    if args.builder == "exact":
        lists = exact_knn(ds, args.k, params)
    else:
        lists = nn_descent_knn(ds, args.k, params, rho=args.rho, max_iters=args.max_iters, delta=args.delta, seed=args.seed)
        builder.update(rho=args.rho, delta=args.delta, max_iters=args.max_iters, seed=args.seed)
    builder["seconds"] = round(time.perf_counter() - t0, 4)
    if args.builder == "nn-descent":
        builder["recall_estimate"] = _sampled_recall(ds, lists, args.k, params, args.recall_sample, args.seed)
    a = build_affinity(lists)
    desc_path = out / DESCRIPTORS_FILE
    if Path(args.descriptors).resolve() != desc_path.resolve():
        shutil.copyfile(args.descriptors, desc_path)
    save_graph(a, out / GRAPH_FILE)
    manifest = {
        "version": __version__,
        "alpha": args.alpha,
        "k": args.k,
        "kernel_exponent": args.exponent,
        "lambda": args.lam,
        "builder": builder,
        "n": ds.n,
        "edges": a.nnz // 2,
        "gmp_weights": index_gmp_weights(ds, args.lam).tolist(),
        "created": datetime.now(timezone.utc).isoformat(),
        "hashes": {DESCRIPTORS_FILE: _sha256(desc_path), GRAPH_FILE: _sha256(out / GRAPH_FILE)},
    }
    with open(out / MANIFEST_FILE, "w") as fh:
        json.dump(manifest, fh, indent=1)
    print(f"indexed {ds.n} descriptors, {a.nnz // 2} mutual edges -> {out}")
    return EXIT_OK


def _sampled_recall(ds, lists, k, params, sample, seed) -> float:
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(ds.n, size=min(sample, ds.n), replace=False))
    sims = np.maximum(ds.data[rows] @ ds.data.T, 0.0) ** params.exponent
    sims[np.arange(len(rows)), rows] = -np.inf
    exact, _ = topk_rows(sims, k)
    hits = sum(len(set(a) & set(e)) for a, e in zip(lists.indices[rows].tolist(), exact.tolist()))
    return round(hits / exact.size, 6)


def load_index(path):
    """Read and verify an index directory. Returns (manifest, descriptors, affinity)."""
    path = Path(path)
    try:
        with open(path / MANIFEST_FILE) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"no manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest: {exc}") from exc
    for name, digest in manifest.get("hashes", {}).items():
        if _sha256(path / name) != digest:
            raise FormatError(f"{name} does not match the manifest hash; refusing to use a modified index")
    ds = load_descriptors(path / DESCRIPTORS_FILE)
    a = load_graph(path / GRAPH_FILE)
    if a.n != ds.n:
        raise FormatError(f"graph has {a.n} nodes but descriptors have {ds.n} rows")
    return manifest, ds, a


# --- compact -------------------------------------------------------------------


def cmd_compact(args) -> int:
    ds = load_descriptors(args.descriptors)
    spec = GmmSpec(args.components, args.max_em_iters, args.tol, args.seed)
    out = compact_dataset(ds, spec)
    save_descriptors(out, args.out, with_items=True)
    print(f"compacted {ds.n} -> {out.n} descriptors over {len(out.items)} items")
    return EXIT_OK


# --- query ---------------------------------------------------------------------


def _resolve(flag, manifest, key, default, name):
    if flag is None:
        return manifest.get(key, default)
    if key in manifest and manifest[key] != flag:
        _warn(f"--{name} {flag} overrides index value {manifest[key]}")
    return flag


def cmd_query(args) -> int:
    manifest, ds, a = load_index(args.index)
    alpha = _resolve(args.alpha, manifest, "alpha", 0.99, "alpha")
    lam = _resolve(args.lam, manifest, "lambda", 1.0, "lambda")
    exponent = _resolve(args.exponent, manifest, "kernel_exponent", 3, "exponent")
    params = KernelParams(exponent)
    pooling = PoolingSpec(args.pooling, lam)
    opts = SolveOptions(args.max_iters, args.tol, SOLVER_NAMES[args.solver])
    if not 0 < alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    if args.solver == "dense" and ds.n > args.dense_cap:
        raise CapabilityError(f"dense solver refused for n={ds.n} > {args.dense_cap}; use --solver cg")
    weights = None
    if pooling.mode == "gmp":
        stored = manifest.get("gmp_weights")
        if stored is not None and manifest.get("lambda") == lam and len(stored) == ds.n:
            weights = np.asarray(stored, dtype=np.float64)
        else:
            weights = index_gmp_weights(ds, lam)
    k_query = min(args.k_query, ds.n)
    global_top_k = args.global_top_k or k_query
    queries = load_descriptors(args.queries)
    if queries.d != ds.d:
        raise FormatError(f"query dimension {queries.d} does not match index dimension {ds.d}")
    g = normalize(a, alpha) if args.mode == "diffusion" and args.shortlist == 0 else None
    glob = global_descriptors(ds) if args.mode == "knn" or args.shortlist > 0 or args.mode == "aqe" else None

    def run(qid):
        t0 = time.perf_counter()
        regions = queries.regions(qid)
        if args.mode == "knn":
            order = knn_order(glob, regions)
            res = RankingResult(None, {}, order, None)
            scores = dict(zip(glob.item_of.tolist(), (glob.data @ regions.sum(0) / np.linalg.norm(regions.sum(0))).tolist()))
            res.item_scores = scores
        elif args.mode == "aqe":
            q = regions.sum(0)
            res = aqe_baseline(glob, q / np.linalg.norm(q), args.aqe_top_n, params)
        else:
            y = build_query_vector(ds, regions, k_query, params, global_top_k)
            if args.shortlist > 0:
                init = knn_order(glob, regions)
                res = rerank_truncated(a, ds, init, args.shortlist, y, pooling, alpha, opts, weights, args.dense_cap)
            else:
                res = rank(g, ds, y, pooling, opts, weights, args.dense_cap)
        elapsed = 1e3 * (time.perf_counter() - t0)
        return qid, res, elapsed

    lines = []
    failures = []
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        for qid, res, elapsed in pool.map(run, queries.items):
            order = res.order if args.top is None else res.order[: args.top]
            record = {"query_id": qid, "order": order, "scores": [res.item_scores.get(i) for i in order]}
            rep = res.solve_report
            record["iterations"] = rep.iterations_used if rep else 0
            record["residual"] = rep.final_relative_residual if rep else 0.0
            record["converged"] = rep.converged if rep else True
            if not args.omit_timing:
                record["elapsed_ms"] = round(elapsed, 3)
            if rep and not rep.converged:
                failures.append(qid)
            lines.append(json.dumps(record) + "\n")
    out = open(args.out, "w") if args.out != "-" else sys.stdout
    try:
        for line in lines:
            out.write(line)
    finally:
        if out is not sys.stdout:
            out.close()
    if failures:
        _warn(f"{len(failures)} queries did not converge: {failures[:10]}")
        if args.strict:
            raise NumericalError(f"{len(failures)} queries did not converge")
    return EXIT_OK


# --- eval ----------------------------------------------------------------------


def read_rankings(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["query_id"])] = rec
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"{path}:{lineno}: bad ranking line ({exc})") from exc
    return out


def cmd_eval(args) -> int:
    rankings = read_rankings(args.rankings)
    gt = GroundTruth.load(args.groundtruth)
    truths = {str(q): t for q, t in gt.queries.items()}
    missing = sorted(set(rankings) - set(truths))
    if missing:
        raise InputError(f"no ground truth for queries: {', '.join(missing)}")
    unranked = sorted(set(truths) - set(rankings))
    if unranked:
        raise InputError(f"no ranking for queries: {', '.join(unranked)}")
    per_query = {}
    for qid in sorted(rankings, key=_id_key):
        per_query[qid] = average_precision(rankings[qid]["order"], truths[qid])
    print(f"{mean_average_precision(per_query.values()):.6f}")
    if args.ap_csv:
        with open(args.ap_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_id", "ap"])
            for qid, ap in per_query.items():
                w.writerow([qid, f"{ap:.6f}"])
    if args.report:
        if not (args.baseline and args.sizes):
            raise InputError("--report needs --baseline and --sizes")
        base = read_rankings(args.baseline)
        absent = sorted(set(rankings) - set(base))
        if absent:
            raise InputError(f"baseline lacks queries: {', '.join(absent)}")
        with open(args.sizes) as fh:
            sizes = {int(k): float(v) for k, v in json.load(fh).items()}
        ids = sorted(rankings, key=_id_key)
        report = rank_gain_report(
            [base[q]["order"] for q in ids], [rankings[q]["order"] for q in ids], [truths[q] for q in ids], sizes
        )
        if report.skipped:
            _warn(f"{report.skipped} positives without a size were skipped")
        with open(args.report, "w") as fh:
            fh.write(report.to_csv())
    return EXIT_OK


def _id_key(qid: str):
    return (0, int(qid), "") if qid.lstrip("-").isdigit() else (1, 0, qid)


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="manifold-rank", description="Diffusion ranking on mutual-kNN region graphs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["crescents", "regional"], default="crescents")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-per-manifold", type=_positive_int, default=1000)
    s.add_argument("--sigma", type=float, default=0.05)
    s.add_argument("--background", type=_nonneg_int, default=0)
    s.add_argument("--queries-per-manifold", type=_positive_int, default=5)
    s.add_argument("--contours", help="write x,y,score CSV of diffusion scores on a planar grid")
    s.add_argument("--contour-query", type=float, nargs=2, metavar=("X", "Y"))
    s.add_argument("--contour-k", type=_positive_int, default=10)
    s.add_argument("--grid", type=_positive_int, default=60)
    s.add_argument("--alpha", type=float, default=0.99)
    s.add_argument("--exponent", type=_positive_int, default=3)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("index", help="build the mutual-kNN graph and manifest")
    s.add_argument("--descriptors", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=_positive_int, default=200)
    s.add_argument("--builder", choices=["exact", "nn-descent"], default="exact")
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--delta", type=float, default=0.001)
    s.add_argument("--max-iters", type=_positive_int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--recall-sample", type=_positive_int, default=200)
    s.add_argument("--alpha", type=float, default=0.99)
    s.add_argument("--exponent", type=_positive_int, default=3)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("compact", help="reduce regions per item with a GMM")
    s.add_argument("--descriptors", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--components", type=_positive_int, default=5)
    s.add_argument("--max-em-iters", type=_positive_int, default=50)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_compact)

    s = sub.add_parser("query", help="rank the index for each query item")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", default="-")
    s.add_argument("--mode", choices=["diffusion", "knn", "aqe"], default="diffusion")
    s.add_argument("--alpha", type=float)
    s.add_argument("--exponent", type=_positive_int)
    s.add_argument("--k-query", type=_positive_int, default=200)
    s.add_argument("--global-top-k", type=_positive_int)
    s.add_argument("--pooling", choices=["sum", "gmp"], default="gmp")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--shortlist", type=_nonneg_int, default=0)
    s.add_argument("--solver", choices=list(SOLVER_NAMES), default="cg")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iters", type=_positive_int, default=50)
    s.add_argument("--dense-cap", type=_positive_int, default=2000)
    s.add_argument("--aqe-top-n", type=_nonneg_int, default=10)
    s.add_argument("--top", type=_positive_int, help="emit only the first N items per query")
    s.add_argument("--strict", action="store_true", help="exit 3 if any solve fails to converge")
    s.add_argument("--omit-timing", action="store_true", help="leave elapsed_ms out for reproducible output")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="mAP of a ranking file against ground truth")
    s.add_argument("--rankings", required=True)
    s.add_argument("--groundtruth", required=True)
    s.add_argument("--ap-csv")
    s.add_argument("--baseline", help="baseline rankings for the size report")
    s.add_argument("--sizes", help="JSON map item -> relative object size")
    s.add_argument("--report", help="CSV precision-by-size report")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ManifoldRankError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
