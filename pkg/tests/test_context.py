import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellhier.context import (
    ContextGraph,
    Decoder,
    WalkPath,
    build_synthetic_context_graph,
    cpr_loss,
    decode,
    discrepancy,
    load_context_graph,
    random_walk,
    save_context_graph,
    trivial_walk,
)
from cellhier.data import DEFAULT_PROFILE, ProfileEntry, generate_synthetic

from conftest import numeric_grad, rel_err


def chain_graph():
    nodes = [("m", "molecule"), ("c", "cell", "cp"), ("g", "gene", "gx")]
    return ContextGraph(nodes, [("m", "c", 0.5), ("c", "g", 0.4)])


def test_graph_validation():
    nodes = [("a", "molecule"), ("b", "cell")]
    with pytest.raises(ValueError, match="outside"):
        ContextGraph(nodes, [("a", "b", 1.5)])
    with pytest.raises(ValueError, match="duplicate edge"):
        ContextGraph(nodes, [("a", "b", 0.5), ("b", "a", 0.2)])
    with pytest.raises(ValueError, match="unknown kind"):
        ContextGraph([("a", "protein")], [])
    with pytest.raises(ValueError, match="self-loop"):
        ContextGraph(nodes, [("a", "a", 0.5)])


def test_undirected_storage():
    g = chain_graph()
    assert g.neighbors("c")[0] == ("m", "g")
    assert g.neighbors("m")[0] == ("c",)


def test_walk_cumulative_product():
    # from m the only move is to c; from c it may return to m or go to g
    for seed in range(20):
        walk = random_walk(chain_graph(), "m", 2, seed)
        if walk.nodes == ("m", "c", "g"):
            assert walk.cum_weights == (1.0, 0.5, 0.2)
            break
    else:
        pytest.fail("no walk reached g")


def test_walk_transition_probability_follows_beta():
    g = chain_graph()
    rng = np.random.default_rng(0)
    hits = sum(random_walk(g, "c", 1, rng).nodes[1] == "m" for _ in range(4000))
    assert abs(hits / 4000 - 0.5 / 0.9) < 0.03


def test_isolated_start():
    g = ContextGraph([("m", "molecule")], [])
    walk = random_walk(g, "m", 4, 1)
    assert walk.visited == (("m",), (1.0,))
    assert walk.nodes == ("m", None, None, None, None)
    assert walk.cum_weights == (1.0,) * 5


def test_dead_end_after_steps():
    g = ContextGraph([("a", "molecule"), ("b", "cell")], [("a", "b", 0.0)])
    walk = random_walk(g, "a", 3, 0)
    assert walk.visited == (("a",), (1.0,))


def test_single_neighbour_chain_is_seed_independent():
    nodes = [(f"n{i}", "cell") for i in range(6)]
    g = ContextGraph(nodes, [(f"n{i}", f"n{i + 1}", 0.9) for i in range(5)])
    # a path graph walked from an end: the first step is forced, later ones are not
    walks = {random_walk(g, "n0", 1, s).nodes for s in range(10)}
    assert walks == {("n0", "n1")}


def test_unknown_start():
    with pytest.raises(KeyError):
        random_walk(chain_graph(), "zz", 2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 8), length=st.integers(0, 6), c=st.floats(0.05, 1.0))
def test_walk_weights_property(seed, n, length, c):
    rng = np.random.default_rng(seed)
    nodes = [(f"v{i}", "cell") for i in range(n)]
    edges = [(f"v{i}", f"v{j}", float(rng.random())) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    g = ContextGraph(nodes, edges)
    walk = random_walk(g, "v0", length, seed)
    assert walk.cum_weights[0] == 1.0 and len(walk.nodes) == length + 1
    assert all(b <= a for a, b in zip(walk.cum_weights, walk.cum_weights[1:]))
    # with the same seed the scaled graph takes the same path (proportional choice)
    scaled = random_walk(g.scaled(c), "v0", length, seed)
    assert scaled.nodes == walk.nodes
    hops = len(walk.visited[0]) - 1
    for level, (w, ws) in enumerate(zip(walk.cum_weights[: hops + 1], scaled.cum_weights)):
        assert abs(ws - w * c**level) <= 1e-12


def test_synthetic_graph_properties():
    ds = generate_synthetic(60, seed=3)
    g = build_synthetic_context_graph(ds, seed=1)
    assert g == build_synthetic_context_graph(ds, seed=1)
    assert all(0.0 <= b <= 1.0 for _, _, b in g.edges)
    mol = [n for n in g.nodes if n.kind == "molecule"]
    assert [n.id for n in mol] == [r.id for r in ds.records]
    kinds = {n.modality: n.kind for n in g.nodes if n.kind != "molecule"}
    assert kinds["cp_jump"] == "cell" and kinds.get("l1000", "gene") == "gene"
    for u, v, _ in g.edges:
        rec = ds.records[int(u[3:])]
        assert rec.features[g.node(v).modality] is not None


def test_synthetic_graph_without_observed_externals():
    profile = [e for e in DEFAULT_PROFILE if e.spec.is_molecular]
    profile.append(ProfileEntry(DEFAULT_PROFILE[3].spec, 1.0))
    g = build_synthetic_context_graph(generate_synthetic(10, profile, seed=0))
    assert len(g.nodes) == 10 and g.edges == ()


def test_graph_file_round_trip(tmp_path):
    g = build_synthetic_context_graph(generate_synthetic(30, seed=4))
    path = tmp_path / "g.jsonl"
    save_context_graph(g, path)
    assert load_context_graph(path) == g
    lines = path.read_text().splitlines()
    assert lines[0] == '{"version": 1}'


def test_decode_examples():
    p = np.array([2.0, 3.0])
    np.testing.assert_array_equal(decode(Decoder(np.eye(2), np.zeros(2)), p), p)
    np.testing.assert_array_equal(decode(Decoder(np.zeros((1, 2)), [7.0]), p), [7.0])
    np.testing.assert_array_equal(decode(Decoder([[1.0, 1.0]], [0.0]), p), [5.0])
    with pytest.raises(ValueError):
        decode(Decoder(np.eye(2), np.zeros(2)), np.ones(3))


def test_cpr_examples():
    walk = [WalkPath(("u",), (1.0,))]
    perfect = cpr_loss(walk, {"u": {"c": np.array([1.0, 1.0])}}, {"u": {"c": (np.array([1.0, 1.0]), "continuous")}})
    assert perfect.loss == 0.0
    res = cpr_loss(walk, {"u": {"c": np.array([0.0, 0.0])}}, {"u": {"c": (np.array([1.0, 1.0]), "continuous")}})
    assert res.loss == 1.0
    bce = cpr_loss(walk, {"u": {"b": np.array([0.0])}}, {"u": {"b": (np.array([1.0]), "binary")}})
    assert abs(bce.loss - math.log(2)) < 1e-12


def test_cpr_missing_reconstruction():
    with pytest.raises(KeyError):
        cpr_loss([WalkPath(("u",), (1.0,))], {}, {"u": {"c": (np.zeros(1), "continuous")}})


def test_cpr_weights_skip_padding_and_untargeted_nodes():
    walks = [WalkPath(("a", "b", None), (1.0, 0.5, 0.5)), WalkPath(("b", "x", "a"), (1.0, 0.3, 0.06))]
    targets = {"a": {"c": (np.array([1.0]), "continuous")}, "b": {"c": (np.array([0.0]), "continuous")}}
    decoded = {"a": {"c": np.array([0.0])}, "b": {"c": np.array([2.0])}}
    # a: D=1 at weights 1 and 0.06; b: D=4 at weights 0.5 and 1
    expect = (1.0 * 1 + 0.06 * 1 + 0.5 * 4 + 1.0 * 4) / 2
    assert abs(cpr_loss(walks, decoded, targets).loss - expect) < 1e-12


def test_cpr_gradients_by_finite_differences():
    rng = np.random.default_rng(5)
    walks = [WalkPath(("a", "b", "c"), (1.0, 0.7, 0.21)), WalkPath(("c", "a", None), (1.0, 0.4, 0.4))]
    targets = {
        "a": {"x": (rng.standard_normal(3), "continuous"), "y": ((rng.random(2) > 0.5).astype(float), "binary")},
        "b": {"x": (rng.standard_normal(3), "continuous")},
        "c": {"y": ((rng.random(2) > 0.5).astype(float), "binary")},
    }
    decoded = {n: {m: rng.standard_normal(t[0].shape) for m, t in mods.items()} for n, mods in targets.items()}
    res = cpr_loss(walks, decoded, targets)
    assert res.loss >= 0
    for node, mods in decoded.items():
        for mod, vec in mods.items():
            num = numeric_grad(lambda: cpr_loss(walks, decoded, targets).loss, vec)
            assert rel_err(res.grads[node][mod], num) < 1e-6


def test_discrepancy_stable_for_large_logits():
    values, grad = discrepancy(np.array([[800.0, -800.0]]), np.array([[1.0, 0.0]]), "binary")
    assert values[0] == 0.0 and np.all(np.isfinite(grad))


def test_trivial_walk():
    walk = trivial_walk("s", 3)
    assert walk.visited == (("s",), (1.0,)) and walk.length == 3
