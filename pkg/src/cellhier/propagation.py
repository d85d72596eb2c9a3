"""Graph-based imputation of missing modality features.

Missing rows are filled by repeatedly averaging their neighbours on a sparse
top-K cosine-similarity graph while observed rows stay clamped. The fixed point
of that recurrence solves ``(I - W_mm) X_m = W_mo X_o``; for a symmetric weight
matrix it is the minimiser of the Dirichlet energy with the observed rows as
boundary values.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DisconnectedNodesError, ZeroNormError


@dataclass(frozen=True)
class SimilarityGraph:
    """Sparse row-stochastic neighbour graph. ``weights[i, j]`` is ``W_ij``."""

    weights: sp.csr_matrix
    k: int

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        start, stop = self.weights.indptr[i], self.weights.indptr[i + 1]
        return [(int(j), float(w)) for j, w in zip(self.weights.indices[start:stop], self.weights.data[start:stop])]

    @classmethod
    def from_neighbors(cls, n: int, neighbors: dict[int, dict[int, float]], k: int | None = None):
        """Build a graph from ``{node: {target: weight}}`` (weights taken as given)."""
        rows, cols, vals = [], [], []
        for i, nbrs in neighbors.items():
            for j, w in nbrs.items():
                rows.append(i)
                cols.append(j)
                vals.append(w)
        mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
        mat.sort_indices()
        if k is None:
            k = int(np.diff(mat.indptr).max(initial=0))
        return cls(mat, k)

    def symmetrized(self) -> sp.csr_matrix:
        """``(W + W^T) / 2`` as a sparse matrix."""
        return ((self.weights + self.weights.T) * 0.5).tocsr()


class PropagationResult(NamedTuple):
    matrix: np.ndarray
    residuals: list[float]


def build_knn_graph(features: np.ndarray, k: int) -> SimilarityGraph:
    """Top-``k`` cosine neighbour graph with similarities clipped at zero.

    Ties are broken toward the lower node index; retained weights are normalised
    to sum to one and zero-similarity neighbours are dropped.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D array")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two rows to build a neighbour graph")
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormError(int(zero[0]))
    unit = x / norms[:, None]
    sim = np.clip(unit @ unit.T, 0.0, None)
    np.fill_diagonal(sim, -np.inf)
    # stable sort on the negated similarity keeps lower indices first among ties
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sim, order, axis=1)
    totals = top.sum(axis=1)
    rows, cols, vals = [], [], []
    for i in range(n):
        if totals[i] <= 0:
            continue
        keep = top[i] > 0
        rows.extend([i] * int(keep.sum()))
        cols.extend(order[i, keep].tolist())
        vals.extend((top[i, keep] / totals[i]).tolist())
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
    mat.sort_indices()
    return SimilarityGraph(mat, k)


def _check_inputs(matrix, mask, graph):
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    m = np.asarray(mask).astype(bool).reshape(-1)
    if m.shape[0] != x.shape[0]:
        raise ValueError(f"mask length {m.shape[0]} does not match {x.shape[0]} rows")
    if graph.n != x.shape[0]:
        raise ValueError(f"graph has {graph.n} nodes but the matrix has {x.shape[0]} rows")
    return x, m


def propagate(matrix, mask, graph: SimilarityGraph, iterations: int = 5, convergence_tol: float = 0.0):
    """Iteratively fill the rows with ``mask == 0`` from their neighbours.

    Returns the augmented matrix and, per iteration, the largest absolute
    change of any entry. Missing rows start at zero; with ``convergence_tol > 0``
    the loop stops once the change drops to or below the tolerance.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    x0, observed = _check_inputs(matrix, mask, graph)
    x = np.where(observed[:, None], x0, 0.0)
    residuals = []
    w = graph.weights
    for _ in range(iterations):
        nxt = w @ x
        nxt[observed] = x0[observed]
        change = float(np.max(np.abs(nxt - x), initial=0.0))
        residuals.append(change)
        x = nxt
        if convergence_tol > 0 and change <= convergence_tol:
            break
    return PropagationResult(x, residuals)


def disconnected_missing_nodes(mask, graph: SimilarityGraph) -> list[int]:
    """Missing nodes with no positive-weight path to an observed node."""
    observed = np.asarray(mask).astype(bool).reshape(-1)
    # walk edges backwards from observed nodes: i reaches j if W_ij > 0
    reverse = graph.weights.T.tocsr()
    reached = observed.copy()
    queue = deque(np.flatnonzero(observed).tolist())
    while queue:
        j = queue.popleft()
        for i in reverse.indices[reverse.indptr[j] : reverse.indptr[j + 1]]:
            if not reached[i]:
                reached[i] = True
                queue.append(int(i))
    return np.flatnonzero(~reached).tolist()


def dirichlet_solve_oracle(matrix, mask, graph: SimilarityGraph) -> np.ndarray:
    """Exact fixed point of :func:`propagate` via a dense linear solve.

    Solves ``(I - W_mm) X_m = W_mo X_o`` with LU factorisation (partial pivoting).
    """
    x0, observed = _check_inputs(matrix, mask, graph)
    out = np.where(observed[:, None], x0, 0.0)
    miss = np.flatnonzero(~observed)
    if miss.size == 0:
        return out
    bad = disconnected_missing_nodes(observed, graph)
    if bad:
        raise DisconnectedNodesError(bad)
    obs = np.flatnonzero(observed)
    w = graph.weights
    w_mm = w[miss][:, miss].toarray()
    w_mo = w[miss][:, obs]
    system = np.eye(miss.size) - w_mm
    rhs = w_mo @ x0[obs]
    out[miss] = np.linalg.solve(system, np.asarray(rhs))
    return out


def dirichlet_energy(matrix, graph) -> float:
    """``1/2 * sum_ij W_ij ||x_i - x_j||^2`` for a graph or a sparse weight matrix."""
    w = graph.weights if isinstance(graph, SimilarityGraph) else sp.csr_matrix(graph)
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if w.shape[0] != x.shape[0]:
        raise ValueError("graph size does not match the matrix")
    coo = w.tocoo()
    diff = x[coo.row] - x[coo.col]
    return float(0.5 * np.sum(coo.data * np.einsum("ij,ij->i", diff, diff)))


def neighbor_mean_impute(matrix, mask, graph: SimilarityGraph) -> np.ndarray:
    """One-shot imputation: unweighted mean of each missing row's observed neighbours."""
    x0, observed = _check_inputs(matrix, mask, graph)
    out = np.where(observed[:, None], x0, 0.0)
    pattern = graph.weights.copy()
    pattern.data = np.ones_like(pattern.data)
    pattern = pattern @ sp.diags(observed.astype(np.float64))
    counts = np.asarray(pattern.sum(axis=1)).reshape(-1)
    sums = pattern @ out
    fill = (~observed) & (counts > 0)
    out[fill] = sums[fill] / counts[fill, None]
    return out


class FeaturePropagationImputer(TransformerMixin, BaseEstimator):
    """Transductive imputer: fit the neighbour graph, then propagate into NaN rows.

    ``fit`` takes the similarity features (one row per molecule); ``transform``
    takes a matrix over the same molecules where missing rows are all-NaN.

    Parameters
    ----------
    k : int
        Neighbour budget of the similarity graph.
    n_iter : int
        Propagation iterations.
    convergence_tol : float
        Early-stop threshold on the per-iteration change; 0 runs all iterations.
    """

    def __init__(self, k=10, n_iter=5, convergence_tol=0.0):
        self.k = k
        self.n_iter = n_iter
        self.convergence_tol = convergence_tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.graph_ = build_knn_graph(X, min(self.k, X.shape[0] - 1))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "graph_")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        missing = np.isnan(X).all(axis=1)
        if np.isnan(X[~missing]).any():
            raise ValueError("rows must be either fully observed or entirely NaN")
        result = propagate(np.nan_to_num(X), ~missing, self.graph_, self.n_iter, self.convergence_tol)
        self.residuals_ = result.residuals
        return result.matrix
