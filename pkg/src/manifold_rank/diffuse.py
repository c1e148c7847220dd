"""Query vectors for unseen (multi-region) queries, diffusion ranking and score pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import NORM_TOL, DescriptorSet, InputError, KernelParams, kernel_from_dot, normalize_rows
from .graph import NormalizedGraph, SparseAffinity, normalize, topk_rows, truncate
from .solver import DENSE_CAP, SolveOptions, SolveReport, solve

POOLING_MODES = ("sum", "gmp")


@dataclass(frozen=True, eq=False)
class QueryVector:
    """Sparse nonnegative n-vector: positive entries at `indices`."""

    indices: np.ndarray
    values: np.ndarray
    n: int
    k_query: int

    @property
    def nnz(self) -> int:
        return self.indices.size

    def to_dense(self) -> np.ndarray:
        y = np.zeros(self.n)
        y[self.indices] = self.values
        return y

    def restrict(self, nodes: np.ndarray) -> "QueryVector":
        """Entries on `nodes` (sorted original ids), re-indexed to positions in `nodes`."""
        pos = np.searchsorted(nodes, self.indices)
        pos = np.minimum(pos, len(nodes) - 1)
        hit = nodes[pos] == self.indices
        return QueryVector(pos[hit], self.values[hit], len(nodes), self.k_query)

    def scaled(self, c: float) -> "QueryVector":
        return QueryVector(self.indices, c * self.values, self.n, self.k_query)


@dataclass(frozen=True)
class PoolingSpec:
    mode: str = "gmp"
    lam: float = 1.0

    def __post_init__(self):
        if self.mode not in POOLING_MODES:
            raise InputError(f"unknown pooling mode {self.mode!r}")
        if self.lam < 0 or (self.mode == "gmp" and self.lam <= 0):
            raise InputError("gmp pooling needs lambda > 0")


@dataclass
class RankingResult:
    point_scores: np.ndarray
    item_scores: dict
    order: list
    solve_report: SolveReport | None = None

    def ordered_scores(self) -> list:
        """Scores aligned with `order`; None for items that were not re-scored."""
        return [self.item_scores.get(item) for item in self.order]


def _check_unit_rows(Q: np.ndarray) -> None:
    norms = np.linalg.norm(Q, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        raise InputError(f"query {int(bad[0])} is not unit norm (norm={norms[bad[0]]:.6g})")


def build_query_vector(
    ds: DescriptorSet,
    queries,
    k_query: int,
    params: KernelParams = KernelParams(),
    global_top_k: int | None = None,
) -> QueryVector:
    """y_i = sum over queries q of s(x_i, q) when x_i is among q's k_query nearest points.

    Only the `global_top_k` largest entries survive (defaults to k_query).
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if Q.size == 0 or Q.shape[0] == 0:
        raise InputError("empty query list")
    if Q.shape[1] != ds.d:
        raise InputError(f"query dimension {Q.shape[1]} does not match descriptor dimension {ds.d}")
    _check_unit_rows(Q)
    if not 1 <= k_query <= ds.n:
        raise InputError(f"k_query must lie in [1, n={ds.n}], got {k_query}")
    if global_top_k is None:
        global_top_k = k_query
    if global_top_k < 1:
        raise InputError("global_top_k must be positive")
    sims = kernel_from_dot(Q @ ds.data.T, params)
    nn, vals = topk_rows(sims, k_query)
    y = np.zeros(ds.n)
    np.add.at(y, nn.ravel(), vals.ravel())
    nz = np.flatnonzero(y > 0)
    if nz.size > global_top_k:
        keep, _ = topk_rows(y[nz][None, :], global_top_k)
        nz = np.sort(nz[keep[0]])
    return QueryVector(nz, y[nz], ds.n, int(k_query))


def gmp_weights(regions, lam: float = 1.0) -> np.ndarray:
    """Weights w solving (Phi Phi^T + lam I) w = 1 for the m x d region matrix Phi."""
    Phi = np.atleast_2d(np.asarray(regions, dtype=np.float64))
    if lam <= 0:
        raise InputError("lambda must be positive")
    m = Phi.shape[0]
    if m < 1:
        raise InputError("need at least one region")
    G = Phi @ Phi.T + lam * np.eye(m)
    return scipy.linalg.solve(G, np.ones(m), assume_a="pos")


def index_gmp_weights(ds: DescriptorSet, lam: float = 1.0) -> np.ndarray:
    """Per-row GMP weight, computed item by item."""
    w = np.empty(ds.n)
    for item, rows in ds.item_rows().items():
        w[rows] = gmp_weights(ds.data[rows], lam)
    return w


def _row_weights(ds: DescriptorSet, pooling: PoolingSpec, weights) -> np.ndarray:
    if pooling.mode == "sum":
        return np.ones(ds.n)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (ds.n,):
            raise InputError("precomputed weights must have one entry per row")
        return weights
    return index_gmp_weights(ds, pooling.lam)


def order_items(items: np.ndarray, scores: np.ndarray, silent: np.ndarray) -> list:
    """Descending score, ties by lower id; items flagged silent go last by id."""
    keys = np.lexsort((items, np.where(silent, 0.0, -scores), silent))
    return items[keys].tolist()


def pool(f: np.ndarray, ds: DescriptorSet, row_weights: np.ndarray, items=None) -> tuple[dict, list]:
    """Item score = sum_j w_j f_j over the item's rows. Returns (scores, order)."""
    if items is None:
        items = ds.items
    items = np.asarray(items, dtype=np.int64)
    scores = np.empty(len(items))
    silent = np.empty(len(items), dtype=bool)
    for t, item in enumerate(items.tolist()):
        rows = ds.rows_of(item)
        scores[t] = float(row_weights[rows] @ f[rows])
        silent[t] = not f[rows].any()
    return dict(zip(items.tolist(), scores.tolist())), order_items(items, scores, silent)


def rank(
    g: NormalizedGraph,
    ds: DescriptorSet,
    y,
    pooling: PoolingSpec = PoolingSpec(),
    opts: SolveOptions = SolveOptions(),
    weights=None,
    dense_cap: int = DENSE_CAP,
) -> RankingResult:
    """Diffuse y over the graph and pool point scores into an item ranking."""
    if g.n != ds.n:
        raise InputError(f"graph has {g.n} nodes but descriptor set has {ds.n} rows")
    report = solve(g, y, opts, dense_cap)
    f = report.solution
    scores, order = pool(f, ds, _row_weights(ds, pooling, weights))
    return RankingResult(f, scores, order, report)


def rerank_truncated(
    g_full: SparseAffinity,
    ds: DescriptorSet,
    initial_order,
    shortlist_size: int,
    y: QueryVector,
    pooling: PoolingSpec = PoolingSpec(),
    alpha: float = 0.99,
    opts: SolveOptions = SolveOptions(),
    weights=None,
    dense_cap: int = DENSE_CAP,
) -> RankingResult:
    """Diffuse on the affinity restricted to the shortlist's regions; the rest keeps its initial order."""
    initial_order = [int(i) for i in initial_order]
    if sorted(initial_order) != sorted(ds.items):
        raise InputError("initial order must list every item exactly once")
    if shortlist_size < 1:
        raise InputError("shortlist size must be positive")
    shortlist = initial_order[:shortlist_size]
    keep = np.concatenate([ds.rows_of(item) for item in shortlist])
    sub, nodes = truncate(g_full, keep)
    gs = normalize(sub, alpha)
    report = solve(gs, y.restrict(nodes), opts, dense_cap)
    f = np.zeros(ds.n)
    f[nodes] = report.solution
    scores, order = pool(f, ds, _row_weights(ds, pooling, weights), items=shortlist)
    rest = initial_order[len(shortlist):]
    report.solution = f
    return RankingResult(f, scores, order + rest, report)


def global_descriptors(ds: DescriptorSet) -> DescriptorSet:
    """One vector per item: the renormalized sum of its regions."""
    items = ds.items
    sums = np.stack([ds.data[ds.rows_of(item)].sum(axis=0) for item in items])
    norms = np.linalg.norm(sums, axis=1)
    sums[norms == 0] = ds.data[[ds.rows_of(item)[0] for item in np.asarray(items)[norms == 0]]]
    return DescriptorSet.from_rows(sums, item_of=np.asarray(items), region_of=np.zeros(len(items), dtype=np.int64))


def aggregate_query(queries) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64)).sum(axis=0)
    nq = np.linalg.norm(q)
    return q / nq if nq > 0 else np.atleast_2d(queries)[0]


def knn_order(global_ds: DescriptorSet, queries) -> list:
    """Initial ranking of items by inner product of aggregated global descriptors."""
    q = aggregate_query(queries)
    scores = global_ds.data @ q
    items = global_ds.item_of
    return order_items(items, scores, np.zeros(len(items), dtype=bool))


def aqe_baseline(ds: DescriptorSet, query, top_n: int, params: KernelParams = KernelParams()) -> RankingResult:
    """Average query expansion over one descriptor per item."""
    if any(len(rows) != 1 for rows in ds.item_rows().values()):
        raise InputError("AQE expects exactly one descriptor per item")
    if top_n < 0 or top_n >= ds.n:
        raise InputError(f"top_n must lie in [0, n={ds.n}), got {top_n}")
    q = np.asarray(query, dtype=np.float64)
    _check_unit_rows(q[None, :])
    zeros = np.zeros(ds.n, dtype=bool)

    def query_once(v):
        s = kernel_from_dot(ds.data @ v, params)
        return s, order_items(ds.item_of, s, zeros)

    sims, order = query_once(q)
    if top_n > 0:
        top_rows = [int(ds.rows_of(item)[0]) for item in order[:top_n]]
        expanded = normalize_rows((q + ds.data[top_rows].sum(axis=0))[None, :])[0]
        sims, order = query_once(expanded)
    scores = dict(zip(ds.item_of.tolist(), sims.tolist()))
    return RankingResult(sims, scores, order, None)
