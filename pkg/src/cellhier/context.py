"""Context graph over molecules and biological entities, walks and reconstruction.

Each molecule starts a weighted random walk; every visited node with a feature
target is reconstructed from the shared space, weighted by the product of
edge strengths traversed so far.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from os import PathLike
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .data import Dataset, apply_placeholder

NODE_KINDS = ("molecule", "cell", "gene")
_KIND_OF_MODALITY = {"cellular": "cell", "gene": "gene", "gene_expression": "gene"}


class ContextNode(NamedTuple):
    id: str
    kind: str
    modality: str | None = None


class ContextGraph:
    """Undirected graph with edge strengths in ``[0, 1]``.

    Nodes may name the modality whose features they carry (bucket nodes do).
    """

    def __init__(self, nodes: Sequence, edges: Sequence):
        self.nodes = tuple(ContextNode(*n) for n in nodes)
        self._kinds = {}
        for node in self.nodes:
            if node.kind not in NODE_KINDS:
                raise ValueError(f"node {node.id!r}: unknown kind {node.kind!r}")
            if node.id in self._kinds:
                raise ValueError(f"duplicate node {node.id!r}")
            self._kinds[node.id] = node
        seen = set()
        clean = []
        adjacency = {node.id: ([], []) for node in self.nodes}
        for u, v, beta in edges:
            beta = float(beta)
            if u not in self._kinds or v not in self._kinds:
                raise ValueError(f"edge ({u!r}, {v!r}) references an unknown node")
            if u == v:
                raise ValueError(f"self-loop on {u!r}")
            if not 0.0 <= beta <= 1.0:
                raise ValueError(f"edge ({u!r}, {v!r}) has weight {beta} outside [0, 1]")
            key = (u, v) if u <= v else (v, u)
            if key in seen:
                raise ValueError(f"duplicate edge ({u!r}, {v!r})")
            seen.add(key)
            clean.append((u, v, beta))
            adjacency[u][0].append(v)
            adjacency[u][1].append(beta)
            adjacency[v][0].append(u)
            adjacency[v][1].append(beta)
        self.edges = tuple(clean)
        self._adjacency = {k: (tuple(n), np.array(b, dtype=np.float64)) for k, (n, b) in adjacency.items()}

    def __contains__(self, node_id) -> bool:
        return node_id in self._kinds

    def __eq__(self, other):
        if not isinstance(other, ContextGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges

    __hash__ = None

    def node(self, node_id: str) -> ContextNode:
        return self._kinds[node_id]

    def neighbors(self, node_id: str) -> tuple[tuple[str, ...], np.ndarray]:
        return self._adjacency[node_id]

    def scaled(self, factor: float) -> "ContextGraph":
        return ContextGraph(self.nodes, [(u, v, b * factor) for u, v, b in self.edges])


@dataclass(frozen=True)
class WalkPath:
    """A walk of fixed length ``L``; after a dead end the nodes are ``None``."""

    nodes: tuple
    cum_weights: tuple

    @property
    def length(self) -> int:
        return len(self.nodes) - 1

    @property
    def visited(self) -> tuple[tuple, tuple]:
        """Nodes actually reached and their cumulative weights."""
        k = sum(1 for n in self.nodes if n is not None)
        return self.nodes[:k], self.cum_weights[:k]


def random_walk(graph: ContextGraph, start: str, length: int, seed=0) -> WalkPath:
    """Walk ``length`` steps, choosing neighbours with probability proportional to weight.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if start not in graph:
        raise KeyError(f"unknown start node {start!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    nodes = [start]
    cum = [1.0]
    current = start
    for _ in range(length):
        names, betas = graph.neighbors(current) if current is not None else ((), None)
        total = betas.sum() if len(names) else 0.0
        if total <= 0:
            nodes.append(None)
            cum.append(cum[-1])
            current = None
            continue
        if len(names) == 1:
            k = 0
        else:
            k = int(np.searchsorted(np.cumsum(betas), rng.random() * total, side="right"))
            k = min(k, len(names) - 1)
        current = names[k]
        nodes.append(current)
        cum.append(cum[-1] * float(betas[k]))
    return WalkPath(tuple(nodes), tuple(cum))


def trivial_walk(start: str, length: int) -> WalkPath:
    """The length-0 walk padded to ``length``: only the start node counts."""
    return WalkPath((start,) + (None,) * length, (1.0,) * (length + 1))


def build_synthetic_context_graph(dataset: Dataset, seed: int = 0, bits: int = 2) -> ContextGraph:
    """Stand-in context graph built from the dataset itself.

    Molecules are bucketed by the sign pattern of ``bits`` seeded random
    projections of their standardised molecular features (a proxy for the
    latent factors). Each external modality gets one node per non-empty bucket;
    a molecule links to the bucket node of every modality it has observed, with
    weight equal to the clipped cosine between its features and the bucket
    centroid.
    """
    view = apply_placeholder(dataset)
    mol = np.hstack([view.matrices[m] for m in dataset.molecular_names]) if dataset.molecular_names else np.zeros((dataset.n, 0))
    std = mol.std(axis=0)
    scaled = np.divide(mol - mol.mean(axis=0), std, out=np.zeros_like(mol), where=std > 0)
    planes = np.random.default_rng([seed, 7]).standard_normal((scaled.shape[1], bits))
    codes = ((scaled @ planes) > 0).astype(np.int64) @ (1 << np.arange(bits))

    nodes = [(rec.id, "molecule") for rec in dataset.records]
    edges = []
    for name in dataset.external_names:
        spec = dataset.spec(name)
        observed = view.column(name).astype(bool)
        x = view.matrices[name]
        for bucket in range(2**bits):
            members = np.flatnonzero(observed & (codes == bucket))
            if members.size == 0:
                continue
            node_id = f"{name}:{bucket}"
            nodes.append((node_id, _KIND_OF_MODALITY[spec.kind], name))
            centroid = x[members].mean(axis=0)
            cnorm = np.linalg.norm(centroid)
            for i in members:
                xnorm = np.linalg.norm(x[i])
                beta = 0.0 if cnorm == 0 or xnorm == 0 else float(np.clip(x[i] @ centroid / (xnorm * cnorm), 0.0, 1.0))
                edges.append((dataset.records[i].id, node_id, beta))
    return ContextGraph(nodes, edges)


def save_context_graph(graph: ContextGraph, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"version": 1}) + "\n")
        for node in graph.nodes:
            obj = {"node": node.id, "kind": node.kind}
            if node.modality is not None:
                obj["modality"] = node.modality
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
        for u, v, beta in graph.edges:
            fh.write(json.dumps({"edge": [u, v], "beta": beta}, separators=(",", ":")) + "\n")


def load_context_graph(path: str | PathLike) -> ContextGraph:
    nodes, edges = [], []
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or json.loads(lines[0]).get("version") != 1:
        raise ValueError("context graph file must start with a version 1 header")
    for lineno, line in enumerate(lines[1:], start=2):
        obj = json.loads(line)
        if "node" in obj:
            nodes.append((obj["node"], obj["kind"], obj.get("modality")))
        elif "edge" in obj:
            u, v = obj["edge"]
            edges.append((u, v, obj["beta"]))
        else:
            raise ValueError(f"line {lineno}: expected a node or edge object")
    return ContextGraph(nodes, edges)


# -- decoders and reconstruction ------------------------------------------------


@dataclass
class Decoder:
    """Affine map from the shared space back to a modality (logits for binary targets)."""

    weight: np.ndarray
    bias: np.ndarray
    target_modality: str = ""

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("decoder weight must be dim_out x d with a length-dim_out bias")


def decode(decoder: Decoder, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != decoder.weight.shape[1]:
        raise ValueError(f"expected input length {decoder.weight.shape[1]}, got {p.shape[-1]}")
    return p @ decoder.weight.T + decoder.bias


def discrepancy(pred: np.ndarray, target: np.ndarray, domain: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-row reconstruction error and its gradient w.r.t. ``pred``.

    Mean BCE-with-logits for ``binary`` targets, mean squared error otherwise.
    """
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    dim = pred.shape[1]
    if domain == "binary":
        values = np.mean(np.logaddexp(0.0, pred) - target * pred, axis=1)
        grad = (0.5 * (1.0 + np.tanh(0.5 * pred)) - target) / dim
    else:
        diff = pred - target
        values = np.mean(diff * diff, axis=1)
        grad = 2.0 * diff / dim
    return values, grad


def weighted_reconstruction(pred, target, weights, domain: str) -> tuple[float, np.ndarray]:
    """``sum_r weights[r] * D(pred[r], target[r])`` and its gradient."""
    values, grad = discrepancy(pred, target, domain)
    w = np.asarray(weights, dtype=np.float64)
    return float(values @ w), grad * w[:, None]


class CprResult(NamedTuple):
    loss: float
    grads: dict[str, dict[str, np.ndarray]]


def cpr_loss(
    walks: Sequence[WalkPath],
    decoded: Mapping[str, Mapping[str, np.ndarray]],
    targets: Mapping[str, Mapping[str, tuple[np.ndarray, str]]],
) -> CprResult:
    """Walk-weighted reconstruction loss averaged over walks.

    ``targets[node][modality] = (vector, value_domain)``; ``decoded`` has the
    matching reconstructions. A node's discrepancy is the mean over its target
    modalities. Nodes without targets and padding after dead ends contribute 0.
    """
    if not walks:
        return CprResult(0.0, {})
    rows: dict[tuple[str, str], list] = {}
    for walk in walks:
        for node, weight in zip(*walk.visited):
            node_targets = targets.get(node)
            if not node_targets:
                continue
            share = weight / (len(walks) * len(node_targets))
            for modality in node_targets:
                if node not in decoded or modality not in decoded[node]:
                    raise KeyError(f"no reconstruction for node {node!r}, modality {modality!r}")
                rows.setdefault((node, modality), []).append(share)
    by_modality: dict[str, list] = {}
    for (node, modality), shares in rows.items():
        by_modality.setdefault(modality, []).append((node, sum(shares)))
    loss = 0.0
    grads: dict[str, dict[str, np.ndarray]] = {}
    for modality, entries in by_modality.items():
        domain = targets[entries[0][0]][modality][1]
        pred = np.array([decoded[n][modality] for n, _ in entries], dtype=np.float64)
        tgt = np.array([targets[n][modality][0] for n, _ in entries], dtype=np.float64)
        value, grad = weighted_reconstruction(pred, tgt, [w for _, w in entries], domain)
        loss += value
        for (node, _), g in zip(entries, grad):
            grads.setdefault(node, {})[modality] = g
    return CprResult(loss, grads)
