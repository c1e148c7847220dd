import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset, random_graph, random_query, random_unit
from oracles import brute_query_vector, coupled_iteration, unit
from manifold_rank.core import DescriptorSet, InputError
from manifold_rank.diffuse import (
    PoolingSpec,
    QueryVector,
    aqe_baseline,
    build_query_vector,
    global_descriptors,
    gmp_weights,
    index_gmp_weights,
    knn_order,
    pool,
    rank,
    rerank_truncated,
)
from manifold_rank.graph import affinity_from_matrix, build_affinity, exact_knn, normalize
from manifold_rank.solver import SolveOptions
from manifold_rank.synth import SyntheticManifoldSpec, generate_manifolds, manifold_queries

TIGHT = SolveOptions(5000, 1e-12)


def regional_set(items, regions, d, rng):
    X = random_unit(items * regions, d, rng)
    return DescriptorSet.from_rows(X, item_of=np.repeat(np.arange(items), regions))


class TestQueryVector:
    def test_exact_match(self, rng):
        ds = random_dataset(20, 5, rng)
        y = build_query_vector(ds, ds.data[7], 1)
        assert y.indices.tolist() == [7] and y.values.tolist() == pytest.approx([1.0])

    def test_duplicate_regions_double(self, rng):
        ds = random_dataset(30, 4, rng)
        q = unit(rng.standard_normal(4))
        one = build_query_vector(ds, [q], 5, global_top_k=30).to_dense()
        two = build_query_vector(ds, [q, q], 5, global_top_k=30).to_dense()
        np.testing.assert_allclose(two, 2 * one)

    def test_brute_force(self, rng):
        X = random_unit(10, 3, rng)
        Q = random_unit(2, 3, rng)
        y = build_query_vector(DescriptorSet.from_rows(X), Q, 3, global_top_k=10)
        np.testing.assert_allclose(y.to_dense(), brute_query_vector(X, Q, 3), atol=1e-15)

    def test_global_top_k(self, rng):
        X = random_unit(40, 3, rng)
        Q = random_unit(3, 3, rng)
        y = build_query_vector(DescriptorSet.from_rows(X), Q, 6, global_top_k=4)
        full = brute_query_vector(X, Q, 6)
        keep = sorted(range(40), key=lambda i: (-full[i], i))[:4]
        assert sorted(y.indices.tolist()) == sorted(i for i in keep if full[i] > 0)
        assert y.nnz <= 6 * 3 and (y.values > 0).all()

    def test_empty(self, rng):
        with pytest.raises(InputError):
            build_query_vector(random_dataset(5, 3, rng), np.zeros((0, 3)), 2)

    def test_non_unit(self, rng):
        with pytest.raises(InputError):
            build_query_vector(random_dataset(5, 3, rng), [[2.0, 0, 0]], 2)

    def test_k_query_range(self, rng):
        with pytest.raises(InputError):
            build_query_vector(random_dataset(5, 3, rng), [[1.0, 0, 0]], 6)

    @given(st.integers(0, 2**31))
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        X = random_unit(25, 4, rng)
        Q = random_unit(2, 4, rng)
        perm = rng.permutation(25)
        y = build_query_vector(DescriptorSet.from_rows(X), Q, 5, global_top_k=25).to_dense()
        yp = build_query_vector(DescriptorSet.from_rows(X[perm]), Q, 5, global_top_k=25).to_dense()
        np.testing.assert_allclose(yp, y[perm])

    def test_restrict(self):
        y = QueryVector(np.array([1, 4, 6]), np.array([0.5, 0.25, 1.0]), 8, 3)
        r = y.restrict(np.array([0, 4, 6, 7]))
        assert r.n == 4 and r.indices.tolist() == [1, 2] and r.values.tolist() == [0.25, 1.0]


class TestGmp:
    def test_single_row(self):
        assert gmp_weights([[1.0, 0.0]], 1.0).tolist() == pytest.approx([0.5])

    def test_orthonormal(self):
        np.testing.assert_allclose(gmp_weights(np.eye(3, 5), 1e-12), np.ones(3), atol=1e-9)

    def test_residual(self, rng):
        Phi = rng.standard_normal((4, 8))
        w = gmp_weights(Phi, 1.0)
        assert np.linalg.norm((Phi @ Phi.T + np.eye(4)) @ w - 1) <= 1e-10

    def test_duplicates_share_weight(self):
        w = gmp_weights([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 1.0)
        assert w[0] == pytest.approx(w[1]) and w[0] + w[1] == pytest.approx(w[2], rel=0.5)
        assert w[0] < w[2]

    def test_bad_lambda(self):
        with pytest.raises(InputError):
            gmp_weights([[1.0, 0.0]], 0.0)
        with pytest.raises(InputError):
            PoolingSpec("gmp", 0.0)

    def test_index_weights(self, rng):
        ds = regional_set(5, 3, 6, rng)
        w = index_gmp_weights(ds, 1.0)
        for item in ds.items:
            np.testing.assert_allclose(w[ds.rows_of(item)], gmp_weights(ds.regions(item), 1.0))


class TestRank:
    def test_global_items_equal_points(self, rng):
        ds, _, g = random_graph(60, 6, rng)
        res = rank(g, ds, random_query(60, rng), PoolingSpec("sum"))
        for item in ds.items:
            assert res.item_scores[item] == res.point_scores[item]
        assert sorted(res.order) == ds.items

    def test_two_manifolds(self):
        spec = SyntheticManifoldSpec()
        md = generate_manifolds(spec)
        g = normalize(build_affinity(exact_knn(md.ds, 10)), 0.99)
        _, Q, labels = manifold_queries(spec, 5, seed=11)
        for q, lab in zip(Q, labels):
            res = rank(g, md.ds, build_query_vector(md.ds, q, 10), PoolingSpec("sum"), TIGHT)
            top = res.order[: int(np.ceil(np.sum(md.labels == lab) / 2))]
            assert (md.labels[top] == lab).all()

    def test_path_graph_decreasing(self):
        n = 10
        A = np.zeros((n, n))
        for i in range(n - 1):
            A[i, i + 1] = A[i + 1, i] = 1.0
        g = normalize(affinity_from_matrix(A), 0.99)
        ds = DescriptorSet.from_rows(np.eye(n))
        seed = 3
        y = np.zeros(n)
        y[seed] = 1.0
        f = rank(g, ds, y, PoolingSpec("sum"), SolveOptions(method="dense_direct")).point_scores
        for side in (range(seed, n), range(seed, -1, -1)):
            vals = f[list(side)]
            assert (np.diff(vals) < 0).all()

    def test_silent_items_last(self):
        A = np.zeros((6, 6))
        A[0, 1] = A[1, 0] = 1.0
        g = normalize(affinity_from_matrix(A), 0.9)
        ds = DescriptorSet.from_rows(np.eye(6), item_of=[5, 5, 2, 4, 0, 3])
        res = rank(g, ds, np.array([1.0, 0, 0, 0, 0, 0]), PoolingSpec("sum"))
        assert res.order == [5, 0, 2, 3, 4]

    def test_scale_invariant_order(self, rng):
        ds = regional_set(30, 3, 6, rng)
        g = normalize(build_affinity(exact_knn(ds, 8)), 0.99)
        y = build_query_vector(ds, random_unit(2, 6, rng), 10)
        a = rank(g, ds, y, PoolingSpec("gmp"), TIGHT)
        b = rank(g, ds, y.scaled(37.5), PoolingSpec("gmp"), TIGHT)
        assert a.order == b.order

    def test_sum_pooling_is_sum(self, rng):
        ds = regional_set(12, 4, 5, rng)
        f = rng.random(ds.n)
        scores, _ = pool(f, ds, np.ones(ds.n))
        for item in ds.items:
            assert scores[item] == pytest.approx(f[ds.rows_of(item)].sum(), rel=1e-15)

    def test_graph_mismatch(self, rng):
        ds, _, g = random_graph(20, 3, rng)
        with pytest.raises(InputError):
            rank(g, random_dataset(21, 8, rng), np.ones(21))

    def test_nonconvergence_still_ranks(self, rng):
        ds, _, g = random_graph(200, 10, rng)
        res = rank(g, ds, random_query(200, rng), PoolingSpec("sum"), SolveOptions(1, 1e-12))
        assert not res.solve_report.converged and len(res.order) == 200


@settings(max_examples=10)
@given(st.integers(10, 60), st.integers(1, 5), st.integers(0, 2**31))
def test_block_decomposition(n, m, seed):
    rng = np.random.default_rng(seed)
    X = random_unit(n, 5, rng)
    ds = DescriptorSet.from_rows(X)
    g = normalize(build_affinity(exact_knn(ds, min(6, n - 1))), 0.99)
    Q = random_unit(m, 5, rng)
    y = build_query_vector(ds, Q, n, global_top_k=n)
    f = rank(g, ds, y, PoolingSpec("sum"), TIGHT).point_scores
    fd = coupled_iteration(g, X, Q)
    np.testing.assert_allclose(unit(f), unit(fd), atol=1e-6)


class TestTruncated:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.ds = regional_set(40, 3, 6, rng)
        self.a = build_affinity(exact_knn(self.ds, 10))
        self.Q = random_unit(2, 6, rng)
        self.y = build_query_vector(self.ds, self.Q, 15)
        self.init = knn_order(global_descriptors(self.ds), self.Q)

    def test_full_shortlist(self):
        full = rank(normalize(self.a, 0.99), self.ds, self.y, PoolingSpec(), TIGHT)
        for size in (40, 100):
            tr = rerank_truncated(self.a, self.ds, self.init, size, self.y, PoolingSpec(), 0.99, TIGHT)
            assert tr.order == full.order
            np.testing.assert_allclose(tr.point_scores, full.point_scores, atol=1e-12)

    def test_single(self):
        tr = rerank_truncated(self.a, self.ds, self.init, 1, self.y, PoolingSpec(), 0.99)
        assert tr.order == self.init
        assert set(tr.item_scores) == {self.init[0]}

    def test_rest_keeps_initial_order(self):
        tr = rerank_truncated(self.a, self.ds, self.init, 10, self.y, PoolingSpec(), 0.99, TIGHT)
        assert tr.order[10:] == self.init[10:]
        assert sorted(tr.order[:10]) == sorted(self.init[:10])

    def test_bad_initial(self):
        with pytest.raises(InputError):
            rerank_truncated(self.a, self.ds, self.init[:-1], 5, self.y)


class TestAqe:
    def test_no_expansion(self, rng):
        ds = random_dataset(30, 5, rng)
        q = unit(rng.standard_normal(5))
        res = aqe_baseline(ds, q, 0)
        sims = np.maximum(ds.data @ q, 0) ** 3
        assert res.order == sorted(range(30), key=lambda i: (-sims[i], i))

    def test_duplicates_unchanged(self):
        v = unit([1.0, 2.0, 0.5])
        X = np.vstack([np.tile(v, (3, 1)), np.eye(3)])
        ds = DescriptorSet.from_rows(X)
        assert aqe_baseline(ds, v, 3).order == aqe_baseline(ds, v, 0).order

    def test_two_clusters(self):
        rng = np.random.default_rng(8)
        c = random_unit(2, 16, rng)
        X = np.vstack([c[i] + 0.6 * rng.standard_normal((50, 16)) / 4 for i in (0, 1)])
        labels = np.repeat([0, 1], 50)
        ds = DescriptorSet.from_rows(X)
        gains = []
        for _ in range(20):
            lab = int(rng.integers(2))
            q = unit(c[lab] + 0.6 * rng.standard_normal(16) / 4)
            plain = aqe_baseline(ds, q, 0).order[:10]
            expanded = aqe_baseline(ds, q, 5).order[:10]
            gains.append((labels[expanded] == lab).sum() - (labels[plain] == lab).sum())
        assert all(gain >= 0 for gain in gains)

    def test_errors(self, rng):
        ds = random_dataset(5, 3, rng)
        with pytest.raises(InputError):
            aqe_baseline(ds, [1.0, 0, 0], 5)
        with pytest.raises(InputError):
            aqe_baseline(regional_set(3, 2, 3, rng), [1.0, 0, 0], 1)
