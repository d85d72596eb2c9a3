import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cellhier.exceptions import DisconnectedNodesError, ZeroNormError
from cellhier.propagation import (
    FeaturePropagationImputer,
    SimilarityGraph,
    build_knn_graph,
    dirichlet_energy,
    dirichlet_solve_oracle,
    disconnected_missing_nodes,
    neighbor_mean_impute,
    propagate,
)


def three_node_graph():
    return SimilarityGraph.from_neighbors(3, {2: {0: 0.5, 1: 0.5}})


def test_knn_ties_exclude_self_and_prefer_lower_index():
    g = build_knn_graph(np.array([[1.0, 0], [1, 0], [0, 1]]), 1)
    assert g.neighbors(0) == [(1, 1.0)]
    assert g.neighbors(1) == [(0, 1.0)]


def test_knn_identical_rows_split_evenly():
    g = build_knn_graph(np.ones((3, 2)), 2)
    for i in range(3):
        nbrs = g.neighbors(i)
        assert len(nbrs) == 2 and all(w == 0.5 for _, w in nbrs)


def test_knn_orthogonal_rows_have_no_neighbours():
    g = build_knn_graph(np.eye(2), 1)
    assert g.neighbors(0) == [] and g.neighbors(1) == []


def test_knn_zero_row_is_an_error():
    with pytest.raises(ZeroNormError) as info:
        build_knn_graph(np.array([[1.0, 0], [0, 0], [1, 1]]), 1)
    assert info.value.row == 1


@settings(max_examples=40, deadline=None)
@given(
    x=arrays(np.float64, st.tuples(st.integers(2, 15), st.integers(1, 4)), elements=st.floats(-5, 5, width=64)),
    k=st.integers(1, 6),
)
def test_knn_row_stochastic(x, k):
    if np.any(np.linalg.norm(x, axis=1) < 1e-6):
        return
    k = min(k, x.shape[0] - 1)
    g = build_knn_graph(x, k)
    w = g.weights.toarray()
    assert np.all(w >= 0) and np.all(np.diag(w) == 0)
    counts = (w > 0).sum(axis=1)
    assert np.all(counts <= k)
    sums = w.sum(axis=1)
    assert np.allclose(sums[counts > 0], 1.0)


def test_propagate_single_step_fixed_point():
    x = np.array([[1.0, 0], [0, 1], [0, 0]])
    res = propagate(x, [1, 1, 0], three_node_graph(), iterations=3)
    np.testing.assert_array_equal(res.matrix[2], [0.5, 0.5])
    assert res.residuals == [0.5, 0.0, 0.0]


def test_propagate_all_observed_is_identity():
    x = np.random.default_rng(0).standard_normal((5, 3))
    g = build_knn_graph(x, 2)
    res = propagate(x, np.ones(5), g, 4)
    np.testing.assert_array_equal(res.matrix, x)
    assert res.residuals == [0.0] * 4


def test_isolated_missing_row_stays_zero():
    g = SimilarityGraph.from_neighbors(3, {0: {1: 1.0}})
    res = propagate(np.array([[0.0], [2.0], [9.0]]), [0, 1, 0], g, 5)
    assert res.matrix[2, 0] == 0.0 and res.matrix[0, 0] == 2.0


def test_convergence_tol_stops_early():
    x = np.array([[1.0, 0], [0, 1], [0, 0]])
    res = propagate(x, [1, 1, 0], three_node_graph(), iterations=50, convergence_tol=1e-12)
    assert len(res.residuals) == 2


def test_propagate_shape_errors():
    g = three_node_graph()
    with pytest.raises(ValueError, match="mask"):
        propagate(np.zeros((3, 1)), [1, 0], g)
    with pytest.raises(ValueError, match="graph"):
        propagate(np.zeros((4, 1)), [1, 0, 1, 1], g)


def test_oracle_three_node_and_chain():
    x = np.array([[1.0, 0], [0, 1], [0, 0]])
    np.testing.assert_array_equal(dirichlet_solve_oracle(x, [1, 1, 0], three_node_graph())[2], [0.5, 0.5])
    chain = SimilarityGraph.from_neighbors(3, {1: {0: 0.5, 2: 0.5}})
    out = dirichlet_solve_oracle(np.array([[1.0], [0.0], [0.0]]), [1, 0, 1], chain)
    assert out[1, 0] == 0.5


def test_oracle_all_observed():
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(dirichlet_solve_oracle(x, [1, 1, 1], three_node_graph()), x)


def test_oracle_lists_disconnected_nodes():
    g = SimilarityGraph.from_neighbors(4, {0: {1: 1.0}, 1: {0: 1.0}, 2: {3: 1.0}})
    with pytest.raises(DisconnectedNodesError) as info:
        dirichlet_solve_oracle(np.zeros((4, 1)), [0, 0, 0, 1], g)
    assert info.value.nodes == [0, 1]
    assert disconnected_missing_nodes([0, 0, 0, 1], g) == [0, 1]


def random_case(rng, n=30, k=4, frac=0.4, d=3):
    feats = rng.standard_normal((n, 5))
    g = build_knn_graph(feats, k)
    mask = rng.random(n) >= frac
    mask[rng.integers(n)] = True
    for node in disconnected_missing_nodes(mask, g):
        mask[node] = True
    return rng.standard_normal((n, d)), mask, g


def test_oracle_is_a_fixed_point_and_limit():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x, mask, g = random_case(rng)
        exact = dirichlet_solve_oracle(x, mask, g)
        # one recurrence step taken from the oracle output (propagate itself restarts from zero)
        again = g.weights @ exact
        again[mask] = x[mask]
        assert np.max(np.abs(again - exact)) <= 1e-12
        gaps = [np.max(np.abs(propagate(x, mask, g, t).matrix - exact)) for t in (10, 40, 160)]
        assert gaps[0] >= gaps[1] >= gaps[2]
        assert gaps[2] < 1e-6
        np.testing.assert_array_equal(propagate(x, mask, g, 7).matrix[mask], x[mask])


def _graph_from_dense(w):
    return SimilarityGraph.from_neighbors(len(w), {i: {int(j): w[i, j] for j in np.flatnonzero(w[i])} for i in range(len(w))})


def test_symmetric_oracle_is_energy_minimum():
    # for symmetric S the energy minimiser is the fixed point of the recurrence on D^-1 S
    rng = np.random.default_rng(2)
    for _ in range(3):
        x, mask, g = random_case(rng, n=20)
        sym = g.symmetrized().toarray()
        deg = sym.sum(axis=1, keepdims=True)
        walk = _graph_from_dense(np.divide(sym, deg, out=np.zeros_like(sym), where=deg > 0))
        exact = dirichlet_solve_oracle(x, mask, walk)
        base = dirichlet_energy(exact, sym)
        for i in np.flatnonzero(~mask):
            for c in range(x.shape[1]):
                for step in (1e-3, -1e-3):
                    pert = exact.copy()
                    pert[i, c] += step
                    assert dirichlet_energy(pert, sym) >= base


def test_dirichlet_energy_examples():
    pair = SimilarityGraph.from_neighbors(2, {0: {1: 1.0}, 1: {0: 1.0}})
    assert dirichlet_energy(np.array([[0.0], [2.0]]), pair) == 4.0
    assert dirichlet_energy(np.ones((2, 3)), pair) == 0.0
    assert dirichlet_energy(np.arange(3.0), SimilarityGraph.from_neighbors(3, {})) == 0.0


def test_neighbor_mean_uses_observed_neighbours_only():
    g = SimilarityGraph.from_neighbors(4, {3: {0: 0.7, 1: 0.2, 2: 0.1}})
    x = np.array([[1.0], [3.0], [100.0], [0.0]])
    out = neighbor_mean_impute(x, [1, 1, 0, 0], g)
    assert out[3, 0] == 2.0 and out[2, 0] == 0.0


def test_imputer_estimator():
    rng = np.random.default_rng(3)
    sim = rng.standard_normal((12, 4))
    x = rng.standard_normal((12, 2))
    x[[2, 5]] = np.nan
    imp = FeaturePropagationImputer(k=3, n_iter=6).fit(sim)
    out = imp.transform(x)
    assert not np.isnan(out).any() and len(imp.residuals_) == 6
    np.testing.assert_array_equal(out[0], x[0])
    assert imp.get_params() == {"k": 3, "n_iter": 6, "convergence_tol": 0.0}
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        imp.transform(bad)
