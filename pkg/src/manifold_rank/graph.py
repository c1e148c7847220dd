"""Mutual-kNN affinity graphs: exact and NN-descent kNN lists, normalization, truncation."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .core import DescriptorSet, FormatError, InputError, KernelParams, kernel_from_dot

GRAPH_MAGIC = b"MRGR"
GRAPH_VERSION = 1
_GRAPH_HEADER = struct.Struct("<4sIQQ")
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class KnnLists:
    """Row i holds node i's neighbors by descending similarity (ties: lower index first)."""

    indices: np.ndarray  # (n, k) int64
    sims: np.ndarray  # (n, k) float64

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True, eq=False)
class SparseAffinity:
    """Symmetric nonnegative affinity with empty diagonal, stored as sorted CSR."""

    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def row(self, i: int) -> list[tuple[int, float]]:
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return list(zip(self.matrix.indices[lo:hi].tolist(), self.matrix.data[lo:hi].tolist()))

    def degrees(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True, eq=False)
class NormalizedGraph:
    s_matrix: sp.csr_matrix
    degrees: np.ndarray
    alpha: float

    @property
    def n(self) -> int:
        return self.s_matrix.shape[0]


def _check_k(n: int, k: int) -> None:
    if int(k) != k or k < 1:
        raise InputError(f"k must be a positive integer, got {k}")
    if k >= n:
        raise InputError(f"k={k} must be smaller than the number of points n={n}")


def topk_rows(sims: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k columns per row by descending value, ties resolved toward lower column index."""
    b, n = sims.shape
    kth = np.partition(sims, n - k, axis=1)[:, n - k]
    greater = sims > kth[:, None]
    equal = sims == kth[:, None]
    need = k - greater.sum(axis=1)
    chosen = greater | (equal & (np.cumsum(equal, axis=1) <= need[:, None]))
    cols = np.nonzero(chosen)[1].reshape(b, k)
    vals = np.take_along_axis(sims, cols, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1), np.take_along_axis(vals, order, axis=1)


def exact_knn(ds: DescriptorSet, k: int, params: KernelParams = KernelParams(), chunk: int = 1024) -> KnnLists:
    """Brute-force kNN lists under the kernel similarity."""
    X = ds.data
    n = X.shape[0]
    _check_k(n, k)
    indices = np.empty((n, k), dtype=np.int64)
    sims = np.empty((n, k), dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        block = kernel_from_dot(X[lo:hi] @ X.T, params)
        block[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        indices[lo:hi], sims[lo:hi] = topk_rows(block, k)
    return KnnLists(indices, sims)


# --- NN-descent -------------------------------------------------------------
# Heaps keep the worst entry (lowest similarity, then highest index) at the root.


@numba.njit(cache=True)
def _worse(s1, i1, s2, i2):
    return s1 < s2 or (s1 == s2 and i1 > i2)


@numba.njit(cache=True)
def _sift_down(idx, sim, flag, row, pos):
    k = idx.shape[1]
    while True:
        left = 2 * pos + 1
        if left >= k:
            break
        worst = left
        right = left + 1
        if right < k and _worse(sim[row, right], idx[row, right], sim[row, left], idx[row, left]):
            worst = right
        if _worse(sim[row, worst], idx[row, worst], sim[row, pos], idx[row, pos]):
            idx[row, pos], idx[row, worst] = idx[row, worst], idx[row, pos]
            sim[row, pos], sim[row, worst] = sim[row, worst], sim[row, pos]
            flag[row, pos], flag[row, worst] = flag[row, worst], flag[row, pos]
            pos = worst
        else:
            break


@numba.njit(cache=True)
def _heap_push(idx, sim, flag, row, j, s, f):
    """Replace the root if (s, j) is better and j is not already listed. Returns 1 on update."""
    if not _worse(sim[row, 0], idx[row, 0], s, j):
        return 0
    for t in range(idx.shape[1]):
        if idx[row, t] == j:
            return 0
    idx[row, 0] = j
    sim[row, 0] = s
    flag[row, 0] = f
    _sift_down(idx, sim, flag, row, 0)
    return 1


@numba.njit(cache=True)
def _kernel(X, a, b, exponent):
    dot = 0.0
    for t in range(X.shape[1]):
        dot += X[a, t] * X[b, t]
    if dot <= 0.0:
        return 0.0
    return dot**exponent


@numba.njit(cache=True)
def _cand_push(cidx, cpri, row, j, p):
    """Bounded candidate heap keyed by random priority (max at root, keep smallest)."""
    m = cidx.shape[1]
    if p >= cpri[row, 0]:
        return
    for t in range(m):
        if cidx[row, t] == j:
            return
    cidx[row, 0] = j
    cpri[row, 0] = p
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= m:
            break
        big = left
        if left + 1 < m and cpri[row, left + 1] > cpri[row, left]:
            big = left + 1
        if cpri[row, big] > cpri[row, pos]:
            cidx[row, pos], cidx[row, big] = cidx[row, big], cidx[row, pos]
            cpri[row, pos], cpri[row, big] = cpri[row, big], cpri[row, pos]
            pos = big
        else:
            break


@numba.njit(cache=True)
def _nn_descent(X, k, exponent, max_cand, max_iters, delta, seed):
    np.random.seed(seed)
    n = X.shape[0]
    idx = np.full((n, k), -1, dtype=np.int64)
    sim = np.full((n, k), -np.inf)
    flag = np.zeros((n, k), dtype=np.uint8)
    for i in range(n):
        filled = 0
        while filled < k:
            j = np.random.randint(n)
            if j == i:
                continue
            filled += _heap_push(idx, sim, flag, i, j, _kernel(X, i, j, exponent), 1)
    iterations = 0
    for it in range(max_iters):
        iterations += 1
        new_c = np.full((n, max_cand), -1, dtype=np.int64)
        new_p = np.full((n, max_cand), np.inf)
        old_c = np.full((n, max_cand), -1, dtype=np.int64)
        old_p = np.full((n, max_cand), np.inf)
        for i in range(n):
            for t in range(k):
                j = idx[i, t]
                p = np.random.random()
                if flag[i, t]:
                    _cand_push(new_c, new_p, i, j, p)
                    _cand_push(new_c, new_p, j, i, p)
                else:
                    _cand_push(old_c, old_p, i, j, p)
                    _cand_push(old_c, old_p, j, i, p)
        # sampled forward entries become old
        for i in range(n):
            for t in range(k):
                j = idx[i, t]
                for c in range(max_cand):
                    if new_c[i, c] == j:
                        flag[i, t] = 0
                        break
        updates = 0
        for v in range(n):
            for a in range(max_cand):
                u1 = new_c[v, a]
                if u1 < 0:
                    continue
                for b in range(a + 1, max_cand):
                    u2 = new_c[v, b]
                    if u2 < 0 or u2 == u1:
                        continue
                    s = _kernel(X, u1, u2, exponent)
                    updates += _heap_push(idx, sim, flag, u1, u2, s, 1)
                    updates += _heap_push(idx, sim, flag, u2, u1, s, 1)
                for b in range(max_cand):
                    u2 = old_c[v, b]
                    if u2 < 0 or u2 == u1:
                        continue
                    s = _kernel(X, u1, u2, exponent)
                    updates += _heap_push(idx, sim, flag, u1, u2, s, 1)
                    updates += _heap_push(idx, sim, flag, u2, u1, s, 1)
        if updates <= delta * n * k:
            break
    return idx, sim, iterations


def nn_descent_knn(
    ds: DescriptorSet,
    k: int,
    params: KernelParams = KernelParams(),
    rho: float = 0.5,
    max_iters: int = 30,
    delta: float = 0.001,
    seed: int = 0,
) -> KnnLists:
    """Approximate kNN lists by neighbor-of-neighbor refinement from a random start."""
    n = ds.n
    _check_k(n, k)
    if not 0 < rho <= 1:
        raise InputError(f"rho must lie in (0, 1], got {rho}")
    if max_iters < 1:
        raise InputError("max_iters must be >= 1")
    if delta < 0:
        raise InputError("delta must be nonnegative")
    # rho*k sampled forward entries plus as many reverse ones
    max_cand = 2 * max(1, int(math.ceil(rho * k)))
    idx, sim, _ = _nn_descent(np.ascontiguousarray(ds.data), int(k), int(params.exponent), max_cand, int(max_iters), float(delta), int(seed))
    # final order: descending similarity, lower index first on ties
    order = np.lexsort((idx, -sim))
    return KnnLists(np.take_along_axis(idx, order, 1), np.take_along_axis(sim, order, 1))


def knn_recall(approx: KnnLists, exact: KnnLists) -> float:
    """Fraction of exact neighbor entries also present in the approximate lists."""
    hits = sum(len(set(a) & set(e)) for a, e in zip(approx.indices.tolist(), exact.indices.tolist()))
    return hits / exact.indices.size


# --- affinity ----------------------------------------------------------------


def build_affinity(lists: KnnLists) -> SparseAffinity:
    """Keep (i, j) only when each lists the other; weight is their similarity."""
    n, k = lists.indices.shape
    if lists.sims.shape != (n, k):
        raise InputError("indices and sims shapes differ")
    rows = np.repeat(np.arange(n), k)
    cols = lists.indices.ravel()
    vals = lists.sims.ravel()
    if cols.min(initial=0) < 0 or cols.max(initial=0) >= n:
        raise InputError("neighbor index out of range")
    if np.any(cols == rows):
        raise InputError("a node lists itself as neighbor")
    directed = sp.csr_matrix((np.ones_like(vals), (rows, cols)), shape=(n, n))
    if directed.nnz != n * k:
        raise InputError("duplicate neighbor in a kNN list")
    M = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    # min(s(i|j), s(j|i)) is zero unless both directions are listed
    A = sp.csr_matrix(M.minimum(M.T))
    A.eliminate_zeros()
    A.sort_indices()
    return SparseAffinity(A)


def affinity_from_matrix(matrix) -> SparseAffinity:
    """Wrap a symmetric nonnegative matrix, dropping the diagonal and explicit zeros."""
    A = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
    A.setdiag(0)
    A.eliminate_zeros()
    A.sort_indices()
    if A.shape[0] != A.shape[1]:
        raise InputError("affinity must be square")
    if (A.data < 0).any():
        raise InputError("affinities must be nonnegative")
    if A.nnz and abs(A - A.T).max() > SYMMETRY_TOL:
        raise InputError("affinity is not symmetric")
    return SparseAffinity(A)


def normalize(a: SparseAffinity, alpha: float) -> NormalizedGraph:
    """S = D^-1/2 A D^-1/2; isolated nodes get zero rows."""
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie strictly in (0, 1), got {alpha}")
    deg = a.degrees()
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    D = sp.diags(inv_sqrt)
    S = sp.csr_matrix(D @ a.matrix @ D)
    S.sort_indices()
    return NormalizedGraph(S, deg, float(alpha))


def truncate(a: SparseAffinity, keep) -> tuple[SparseAffinity, np.ndarray]:
    """Induced subgraph on `keep`. Returns it with the map from new to original node ids."""
    keep = np.unique(np.asarray(list(keep) if not isinstance(keep, np.ndarray) else keep, dtype=np.int64))
    if keep.size == 0:
        raise InputError("keep set is empty")
    if keep[0] < 0 or keep[-1] >= a.n:
        raise InputError("keep index out of range")
    sub = sp.csr_matrix(a.matrix[keep][:, keep])
    sub.sort_indices()
    return SparseAffinity(sub), keep


# --- MRGR file format ----------------------------------------------------------


def graph_to_bytes(a: SparseAffinity) -> bytes:
    A = a.matrix
    return b"".join(
        [
            _GRAPH_HEADER.pack(GRAPH_MAGIC, GRAPH_VERSION, A.shape[0], A.nnz),
            A.indptr.astype("<u8").tobytes(),
            A.indices.astype("<u4").tobytes(),
            A.data.astype("<f8").tobytes(),
        ]
    )


def save_graph(a: SparseAffinity, path) -> None:
    with open(path, "wb") as fh:
        fh.write(graph_to_bytes(a))


def read_graph(source) -> SparseAffinity:
    header = source.read(_GRAPH_HEADER.size)
    if len(header) != _GRAPH_HEADER.size:
        raise FormatError("truncated graph header")
    magic, version, n, nnz = _GRAPH_HEADER.unpack(header)
    if magic != GRAPH_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GRAPH_MAGIC!r}")
    if version != GRAPH_VERSION:
        raise FormatError(f"unsupported graph format version {version}")
    sizes = (8 * (n + 1), 4 * nnz, 8 * nnz)
    blobs = []
    for size in sizes:
        blob = source.read(size)
        if len(blob) != size:
            raise FormatError("truncated graph payload")
        blobs.append(blob)
    if source.read(1):
        raise FormatError("trailing bytes after graph payload")
    indptr = np.frombuffer(blobs[0], dtype="<u8").astype(np.int64)
    indices = np.frombuffer(blobs[1], dtype="<u4").astype(np.int64)
    data = np.frombuffer(blobs[2], dtype="<f8").astype(np.float64)
    if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr) < 0):
        raise FormatError("invalid row offsets")
    if nnz and indices.max() >= n:
        raise FormatError("column index out of range")
    A = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    if (A.diagonal() != 0).any() or (data <= 0).any():
        raise FormatError("graph must have positive off-diagonal entries only")
    if nnz and abs(A - A.T).max() > SYMMETRY_TOL:
        raise FormatError("graph is not symmetric")
    A.sort_indices()
    return SparseAffinity(A)


def load_graph(source) -> SparseAffinity:
    if isinstance(source, (bytes, bytearray)):
        return read_graph(io.BytesIO(source))
    if hasattr(source, "read"):
        return read_graph(source)
    with open(source, "rb") as fh:
        return read_graph(fh)
