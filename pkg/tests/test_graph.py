import io
import struct
from collections import deque

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset, random_unit
from oracles import brute_affinity, brute_knn
from manifold_rank.core import DescriptorSet, FormatError, InputError, kernel_similarity
from manifold_rank.graph import (
    KnnLists,
    affinity_from_matrix,
    build_affinity,
    exact_knn,
    graph_to_bytes,
    knn_recall,
    load_graph,
    nn_descent_knn,
    normalize,
    truncate,
)


def angles(*deg):
    t = np.radians(deg)
    return DescriptorSet.from_rows(np.column_stack([np.cos(t), np.sin(t)]))


class TestExactKnn:
    def test_collinear(self):
        lists = exact_knn(angles(0, 10, 80), 1)
        assert lists.indices[:, 0].tolist() == [1, 0, 1]
        a = build_affinity(lists)
        assert a.toarray()[0, 1] > 0 and a.toarray()[1, 2] == 0

    def test_complete(self, rng):
        ds = random_dataset(7, 3, rng)
        lists = exact_knn(ds, 6)
        for i in range(7):
            assert sorted(lists.indices[i]) == [j for j in range(7) if j != i]

    def test_orthogonal_ties(self):
        lists = exact_knn(DescriptorSet.from_rows(np.eye(4)), 1)
        assert lists.indices[:, 0].tolist() == [1, 0, 0, 0]
        assert (lists.sims == 0).all()
        assert build_affinity(lists).nnz == 0

    @pytest.mark.parametrize("k", [0, 5, 9])
    def test_bad_k(self, k, rng):
        with pytest.raises(InputError):
            exact_knn(random_dataset(5, 3, rng), k)

    def test_matches_brute_force(self, rng):
        X = random_unit(40, 4, rng)
        assert exact_knn(DescriptorSet.from_rows(X), 5).indices.tolist() == brute_knn(X, 5)

    def test_chunking_irrelevant(self, rng):
        ds = random_dataset(50, 4, rng)
        assert np.array_equal(exact_knn(ds, 6, chunk=7).indices, exact_knn(ds, 6).indices)

    def test_sorted_no_self(self, rng):
        lists = exact_knn(random_dataset(30, 3, rng), 5)
        assert not (lists.indices == np.arange(30)[:, None]).any()
        assert (np.diff(lists.sims, axis=1) <= 0).all()


class TestAffinity:
    def test_reciprocity_required(self):
        lists = KnnLists(np.array([[1], [2], [1]]), np.array([[0.5], [0.4], [0.4]]))
        A = build_affinity(lists).toarray()
        assert A[0, 1] == 0 and A[1, 2] == pytest.approx(0.4)

    def test_mutual_pair_weight(self):
        lists = KnnLists(np.array([[1], [0]]), np.array([[0.2], [0.2]]))
        np.testing.assert_array_equal(build_affinity(lists).toarray(), [[0, 0.2], [0.2, 0]])

    def test_five_points_exhaustive(self, rng):
        X = random_unit(5, 3, rng)
        A = build_affinity(exact_knn(DescriptorSet.from_rows(X), 2)).toarray()
        np.testing.assert_allclose(A, brute_affinity(X, 2), rtol=0, atol=1e-15)

    def test_self_neighbor_rejected(self):
        with pytest.raises(InputError):
            build_affinity(KnnLists(np.array([[0], [0]]), np.ones((2, 1))))

    def test_duplicate_neighbor_rejected(self):
        with pytest.raises(InputError):
            build_affinity(KnnLists(np.array([[1, 1], [0, 2], [0, 1]]), np.ones((3, 2))))

    @settings(max_examples=100)
    @given(st.integers(3, 200), st.integers(2, 6), st.integers(1, 10), st.integers(0, 2**31))
    def test_symmetric_zero_diagonal(self, n, d, k, seed):
        k = min(k, n - 1)
        ds = random_dataset(n, d, np.random.default_rng(seed))
        a = build_affinity(exact_knn(ds, k))
        A = a.matrix
        assert (A != A.T).nnz == 0
        assert not A.diagonal().any()
        assert (A.data > 0).all()
        assert np.diff(A.indptr).max(initial=0) <= k


class TestNormalize:
    def test_unit_degrees(self):
        g = normalize(affinity_from_matrix([[0, 1], [1, 0]]), 0.5)
        np.testing.assert_allclose(g.s_matrix.toarray(), [[0, 1], [1, 0]], atol=1e-15)

    def test_scale_cancels(self):
        g = normalize(affinity_from_matrix([[0, 2], [2, 0]]), 0.5)
        np.testing.assert_allclose(g.s_matrix.toarray(), [[0, 1], [1, 0]], atol=1e-15)
        assert g.degrees.tolist() == [2, 2]

    def test_isolated_zero_row(self):
        g = normalize(affinity_from_matrix([[0, 1, 0], [1, 0, 0], [0, 0, 0]]), 0.5)
        assert not g.s_matrix.toarray()[2].any()

    @pytest.mark.parametrize("alpha", [0, 1, -0.1, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(InputError):
            normalize(affinity_from_matrix([[0, 1], [1, 0]]), alpha)

    def test_spectrum_dense_oracle(self, rng):
        M = rng.random((6, 6))
        A = M + M.T
        np.fill_diagonal(A, 0)
        S = normalize(affinity_from_matrix(A), 0.99).s_matrix.toarray()
        assert np.abs(np.linalg.eigvalsh(S)).max() <= 1 + 1e-12

    @given(st.integers(0, 2**31), st.floats(0.01, 100))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        a = build_affinity(exact_knn(random_dataset(40, 3, rng), 5))
        scaled = affinity_from_matrix(a.matrix * c)
        diff = normalize(a, 0.9).s_matrix - normalize(scaled, 0.9).s_matrix
        assert diff.nnz == 0 or abs(diff).max() <= 1e-12

    @given(st.integers(0, 2**31))
    def test_power_iteration_bound(self, seed):
        rng = np.random.default_rng(seed)
        g = normalize(build_affinity(exact_knn(random_dataset(30, 3, rng), 4)), 0.99)
        v = rng.standard_normal(30)
        for _ in range(200):
            w = g.s_matrix @ v
            nw = np.linalg.norm(w)
            if nw == 0:
                break
            v = w / nw
        v /= max(np.linalg.norm(v), 1e-300)
        assert abs(v @ (g.s_matrix @ v)) <= 1 + 1e-9

    def test_diagonal_dominance(self, rng):
        a = build_affinity(exact_knn(random_dataset(100, 4, rng), 8))
        d = a.degrees()
        live = d > 0
        assert (d[live] - 0.99 * np.asarray(a.matrix.sum(1)).ravel()[live] > 0).all()


def bfs_component(A, start):
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(A[u]):
            if v not in seen:
                seen.add(int(v))
                queue.append(int(v))
    return sorted(seen)


class TestTruncate:
    def test_identity(self, rng):
        a = build_affinity(exact_knn(random_dataset(20, 3, rng), 4))
        sub, nodes = truncate(a, range(20))
        assert (sub.matrix != a.matrix).nnz == 0
        assert nodes.tolist() == list(range(20))

    def test_singleton(self, rng):
        a = build_affinity(exact_knn(random_dataset(20, 3, rng), 4))
        sub, nodes = truncate(a, {3})
        assert sub.n == 1 and sub.nnz == 0 and nodes.tolist() == [3]

    def test_empty(self, rng):
        a = build_affinity(exact_knn(random_dataset(5, 3, rng), 2))
        with pytest.raises(InputError):
            truncate(a, [])

    def test_component(self):
        rng = np.random.default_rng(3)
        X = np.vstack([random_unit(15, 3, rng) * [0.05, 0.05, 1], random_unit(15, 3, rng) * [1, 0.05, 0.05]])
        X[:15, 2] = np.abs(X[:15, 2])
        X[15:, 0] = np.abs(X[15:, 0])
        a = build_affinity(exact_knn(DescriptorSet.from_rows(X), 3))
        A = a.toarray()
        comp = bfs_component(A, 0)
        sub, nodes = truncate(a, comp)
        assert nodes.tolist() == comp
        np.testing.assert_array_equal(sub.toarray(), A[np.ix_(comp, comp)])
        assert sub.nnz == sum(np.count_nonzero(A[i]) for i in comp)


class TestNnDescent:
    def test_small_recall(self):
        ds = random_dataset(20, 5, np.random.default_rng(0))
        approx = nn_descent_knn(ds, 4, rho=1.0, max_iters=10, delta=0.001)
        assert knn_recall(approx, exact_knn(ds, 4)) >= 0.95

    def test_n_equals_2k(self, rng):
        ds = random_dataset(16, 4, rng)
        assert knn_recall(nn_descent_knn(ds, 8), exact_knn(ds, 8)) == 1.0

    def test_deterministic(self, rng):
        ds = random_dataset(200, 6, rng)
        a = nn_descent_knn(ds, 10, seed=5)
        b = nn_descent_knn(ds, 10, seed=5)
        assert np.array_equal(a.indices, b.indices) and np.array_equal(a.sims, b.sims)

    def test_shape_contract(self, rng):
        lists = nn_descent_knn(random_dataset(100, 5, rng), 7)
        assert lists.indices.shape == (100, 7)
        assert not (lists.indices == np.arange(100)[:, None]).any()
        assert all(len(set(r)) == 7 for r in lists.indices.tolist())
        assert (np.diff(lists.sims, axis=1) <= 0).all()

    # Below k ~ 8 the local join can settle in a non-exact fixpoint on such small sets.
    @settings(max_examples=25)
    @given(st.integers(17, 50), st.integers(8, 12), st.integers(0, 2**31))
    def test_fixpoint_is_exact(self, n, k, seed):
        ds = random_dataset(n, 4, np.random.default_rng(seed))
        approx = nn_descent_knn(ds, k, rho=1.0, max_iters=200, delta=0.0, seed=seed % 1000)
        exact = exact_knn(ds, k)
        np.testing.assert_allclose(approx.sims, exact.sims, atol=1e-12)

    @pytest.mark.parametrize("kw", [{"rho": 0}, {"rho": 1.5}, {"max_iters": 0}, {"delta": -1}])
    def test_bad_params(self, kw, rng):
        with pytest.raises(InputError):
            nn_descent_knn(random_dataset(10, 3, rng), 2, **kw)


class TestGraphFile:
    def test_round_trip(self, tmp_path, rng):
        a = build_affinity(exact_knn(random_dataset(30, 3, rng), 4))
        blob = graph_to_bytes(a)
        n, nnz = struct.unpack_from("<QQ", blob, 8)
        assert blob[:4] == b"MRGR" and n == 30 and nnz == a.nnz
        assert len(blob) == 24 + 8 * 31 + 12 * nnz
        back = load_graph(io.BytesIO(blob))
        assert (back.matrix != a.matrix).nnz == 0

    def _blob(self, M):
        A = sp.csr_matrix(np.asarray(M, dtype=float))
        return (
            struct.pack("<4sIQQ", b"MRGR", 1, A.shape[0], A.nnz)
            + A.indptr.astype("<u8").tobytes()
            + A.indices.astype("<u4").tobytes()
            + A.data.astype("<f8").tobytes()
        )

    def test_asymmetric_rejected(self):
        with pytest.raises(FormatError, match="symmetric"):
            load_graph(self._blob([[0, 1], [0.5, 0]]))

    def test_diagonal_rejected(self):
        with pytest.raises(FormatError):
            load_graph(self._blob([[1, 0], [0, 0]]))

    def test_truncated(self):
        with pytest.raises(FormatError, match="truncated"):
            load_graph(self._blob([[0, 1], [1, 0]])[:-3])

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            load_graph(b"XXXX" + self._blob([[0, 1], [1, 0]])[4:])
