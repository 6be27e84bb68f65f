"""
k-nearest-neighbor item graphs and their Laplacians.

The graph is the neighborhood structure of the structured (ICAR) half of the
BYM prior: an undirected 0/1 adjacency W_p built by linking every item to its k
nearest neighbors and symmetrizing by union. Ties in distance go to the lower
index, so graphs are a deterministic function of the inputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from depfa.services.exceptions import GraphError

logger = logging.getLogger(__name__)

Metric = Union[str, Callable[[np.ndarray, np.ndarray], float]]

# Carrier for L_p, Q_phi, Q_delta, Q_0; symmetric by construction
SparseSymMatrix = sp.csr_matrix


@dataclass(frozen=True)
class ItemGraph:
    n_items: int
    k: int
    adjacency: sp.csr_matrix
    degrees: np.ndarray
    metric_id: str

    def edges(self) -> np.ndarray:
        """Edge list as an (m, 2) array with i < j, sorted lexicographically."""
        upper = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return np.column_stack([upper.row[order], upper.col[order]]).astype(np.int64)

    def edge_frame(self) -> pd.DataFrame:
        e = self.edges()
        return pd.DataFrame({"i": e[:, 0], "j": e[:, 1]})

    def to_edge_csv(self, path: str) -> None:
        self.edge_frame().to_csv(path, index=False)


def metric_name(metric: Metric) -> str:
    return metric if isinstance(metric, str) else getattr(metric, "__name__", "custom")


def _as_points(points: Union[np.ndarray, Sequence[Sequence[float]]], label: str) -> np.ndarray:
    try:
        arr = np.asarray(points, dtype=float)
    except ValueError as e:
        raise GraphError(f"{label} must all have the same dimension: {e}") from e
    if arr.ndim != 2:
        raise GraphError(f"{label} must be a 2-D array of shape (n, dim)", {"ndim": int(arr.ndim)})
    if arr.shape[1] == 0:
        raise GraphError(f"{label} are zero-dimensional")
    if not np.all(np.isfinite(arr)):
        raise GraphError(f"{label} contain non-finite coordinates")
    return arr


def nearest_neighbors(
    reference: np.ndarray,
    queries: np.ndarray,
    k: int,
    metric: Metric = "euclidean",
    exclude_self: bool = False,
    block_size: int = 1024,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Brute-force k nearest reference rows for each query row.

    Args:
        reference: (n, dim) reference points
        queries: (m, dim) query points
        k: number of neighbors
        metric: any `scipy.spatial.distance.cdist` metric name or a callable
        exclude_self: queries are the reference set; skip the diagonal
        block_size: query rows per distance block

    Returns:
        (indices, distances), both of shape (m, k), nearest first. Equal
        distances are ordered by reference index.
    """
    reference = _as_points(reference, "reference points")
    queries = _as_points(queries, "query points")
    if reference.shape[1] != queries.shape[1]:
        raise GraphError(
            "query and reference points differ in dimension",
            {"reference_dim": reference.shape[1], "query_dim": queries.shape[1]},
        )
    available = reference.shape[0] - (1 if exclude_self else 0)
    if k < 1 or k > available:
        raise GraphError(f"need 1 <= k <= {available}, got k={k}", {"k": k, "n_reference": reference.shape[0]})

    m = queries.shape[0]
    idx = np.empty((m, k), dtype=np.int64)
    dist = np.empty((m, k), dtype=float)
    for start in range(0, m, block_size):
        stop = min(start + block_size, m)
        d = cdist(queries[start:stop], reference, metric=metric)
        if exclude_self:
            rows = np.arange(stop - start)
            d[rows, rows + start] = np.inf
        # stable sort keeps the lower index first among equal distances
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[start:stop] = order
        dist[start:stop] = np.take_along_axis(d, order, axis=1)
    return idx, dist


def build_knn_graph(points: Union[np.ndarray, Sequence[Sequence[float]]], k: int, metric: Metric = "euclidean") -> ItemGraph:
    """Link each item to its k nearest neighbors; edge (i, j) exists if either end chose the other."""
    pts = _as_points(points, "points")
    n = pts.shape[0]
    if k < 1:
        raise GraphError(f"k must be positive, got {k}", {"k": k})
    if n < k + 1:
        raise GraphError(f"need at least k+1={k + 1} items, got {n}", {"n_items": n, "k": k})

    nbr, _ = nearest_neighbors(pts, pts, k, metric=metric, exclude_self=True)
    rows = np.repeat(np.arange(n), k)
    directed = sp.csr_matrix((np.ones(n * k), (rows, nbr.ravel())), shape=(n, n))
    adjacency = ((directed + directed.T) > 0).astype(float).tocsr()
    adjacency.eliminate_zeros()
    degrees = np.diff(adjacency.indptr).astype(np.int64)
    logger.info(f"knn graph built: n_items={n} k={k} edges={adjacency.nnz // 2} metric={metric_name(metric)}")
    return ItemGraph(n_items=n, k=k, adjacency=adjacency, degrees=degrees, metric_id=metric_name(metric))


def laplacian(g: ItemGraph) -> SparseSymMatrix:
    """L_p = D_p - W_p."""
    lap = (sp.diags(g.degrees.astype(float)) - g.adjacency).tocsr()
    lap.eliminate_zeros()
    return lap


def to_triplets(matrix: sp.spmatrix) -> pd.DataFrame:
    """Upper-triangle (row <= col) nonzero triplets of a symmetric matrix."""
    upper = sp.triu(sp.csr_matrix(matrix)).tocoo()
    keep = upper.data != 0
    return pd.DataFrame({"row": upper.row[keep], "col": upper.col[keep], "value": upper.data[keep]})
