"""
Unit tests for k-NN graph construction and graph Laplacians.
"""
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st

from depfa.services.exceptions import GraphError
from depfa.services.graph import (
    ItemGraph,
    build_knn_graph,
    laplacian,
    nearest_neighbors,
    to_triplets,
)


def _edge_set(g):
    return {tuple(e) for e in g.edges().tolist()}


class TestBuildKnnGraph:
    """Test cases for build_knn_graph."""

    def test_line_tie_goes_to_lower_index(self):
        """Test item 1 picks item 0 when both neighbors are equidistant."""
        g = build_knn_graph([[0.0], [1.0], [2.0]], k=1)

        assert _edge_set(g) == {(0, 1), (1, 2)}
        assert g.degrees.tolist() == [1, 2, 1]

    def test_square_corners_link_sides_only(self):
        """Test each corner of a square links to its two side neighbors."""
        pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]

        g = build_knn_graph(pts, k=2)

        assert _edge_set(g) == {(0, 1), (1, 2), (2, 3), (0, 3)}
        assert g.degrees.tolist() == [2, 2, 2, 2]
        assert g.adjacency.diagonal().sum() == 0

    def test_k_equal_n_minus_one_is_complete(self):
        """Test k = n - 1 gives the complete graph."""
        pts = np.random.default_rng(0).random((6, 3))

        g = build_knn_graph(pts, k=5)

        assert g.degrees.tolist() == [5] * 6
        assert len(_edge_set(g)) == 15

    def test_too_few_items(self):
        """Test fewer than k+1 items is rejected."""
        with pytest.raises(GraphError):
            build_knn_graph([[0.0], [1.0]], k=2)

    def test_zero_dimensional_points(self):
        """Test zero-dimensional points are rejected."""
        with pytest.raises(GraphError):
            build_knn_graph(np.zeros((4, 0)), k=1)

    def test_ragged_points(self):
        """Test points of unequal dimension are rejected."""
        with pytest.raises(GraphError):
            build_knn_graph([[0.0, 1.0], [1.0], [2.0, 0.0]], k=1)

    def test_duplicate_points_allowed(self):
        """Test duplicated covariates still give a valid graph."""
        pts = [[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]

        g = build_knn_graph(pts, k=1)

        assert (0, 1) in _edge_set(g)
        assert np.all(g.degrees >= 1)

    def test_every_row_has_at_least_k_neighbors(self, small_points):
        """Test union symmetrization never drops below k neighbors."""
        g = build_knn_graph(small_points, k=3)

        assert np.all(g.degrees >= 3)
        assert np.array_equal(g.degrees, np.diff(g.adjacency.indptr))

    def test_deterministic(self, small_points):
        """Test identical inputs give identical graphs."""
        a = build_knn_graph(small_points, k=3)
        b = build_knn_graph(small_points, k=3)

        assert (a.adjacency != b.adjacency).nnz == 0

    def test_permutation_equivariance(self, small_points):
        """Test relabeling the inputs relabels the edge set."""
        perm = np.random.default_rng(1).permutation(len(small_points))
        g = build_knn_graph(small_points, k=3)

        h = build_knn_graph(small_points[perm], k=3)

        mapped = {tuple(sorted((int(perm[i]), int(perm[j])))) for i, j in _edge_set(h)}
        assert mapped == _edge_set(g)

    def test_edge_csv(self, small_graph, tmp_path):
        """Test the edge export has one row per undirected edge."""
        path = tmp_path / "edges.csv"

        small_graph.to_edge_csv(str(path))

        lines = path.read_text().strip().splitlines()
        assert lines[0] == "i,j"
        assert len(lines) - 1 == small_graph.adjacency.nnz // 2


class TestNearestNeighbors:
    """Test cases for brute-force neighbor search."""

    def test_blocks_match_single_pass(self):
        """Test block size does not change the result."""
        r = np.random.default_rng(2)
        ref, q = r.random((30, 2)), r.random((7, 2))

        a = nearest_neighbors(ref, q, 4, block_size=3)
        b = nearest_neighbors(ref, q, 4, block_size=1024)

        assert np.array_equal(a[0], b[0])
        assert np.allclose(a[1], b[1])

    def test_dimension_mismatch(self):
        """Test queries must match the reference dimension."""
        with pytest.raises(GraphError):
            nearest_neighbors(np.zeros((5, 2)), np.zeros((1, 3)), 2)

    def test_callable_metric(self):
        """Test a callable metric is accepted."""
        def manhattan(u, v):
            return float(np.abs(u - v).sum())

        idx, dist = nearest_neighbors(np.array([[0.0, 0.0], [1.0, 1.0], [3.0, 0.0]]), np.array([[0.0, 0.5]]), 1, metric=manhattan)

        assert idx[0, 0] == 0
        assert dist[0, 0] == pytest.approx(0.5)


class TestLaplacian:
    """Test cases for the graph Laplacian."""

    def test_path_graph(self):
        """Test L = D - W on a path."""
        g = build_knn_graph([[0.0], [1.0], [2.0]], k=1)

        L = laplacian(g).toarray()

        assert np.array_equal(L, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])

    def test_empty_graph(self):
        """Test a graph without edges has a zero Laplacian."""
        g = ItemGraph(n_items=3, k=0, adjacency=sp.csr_matrix((3, 3)), degrees=np.zeros(3, dtype=np.int64), metric_id="none")

        assert laplacian(g).nnz == 0

    def test_complete_three(self):
        """Test the complete graph on three nodes."""
        g = build_knn_graph([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], k=2)

        L = laplacian(g).toarray()

        assert np.array_equal(L, [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])

    def test_triplets_upper_triangle(self):
        """Test triplet export stores each symmetric entry once."""
        g = build_knn_graph([[0.0], [1.0], [2.0]], k=1)

        t = to_triplets(laplacian(g))

        assert np.all(t["row"] <= t["col"])
        assert len(t) == 5

    @hsettings(max_examples=40, deadline=None)
    @given(n=st.integers(min_value=4, max_value=50), k=st.integers(min_value=1, max_value=3), seed=st.integers(0, 10_000))
    def test_symmetric_psd_zero_row_sums(self, n, k, seed):
        """Test every generated Laplacian is symmetric, PSD and has zero row sums."""
        pts = np.random.default_rng(seed).random((n, 2))
        g = build_knn_graph(pts, k)

        L = laplacian(g).toarray()

        assert np.array_equal(g.adjacency.toarray(), g.adjacency.toarray().T)
        assert np.all(np.diag(g.adjacency.toarray()) == 0)
        assert np.max(np.abs(L.sum(axis=1))) < 1e-12
        w = np.linalg.eigvalsh(L)
        assert w.min() >= -1e-10
        assert abs(w.min()) < 1e-9
