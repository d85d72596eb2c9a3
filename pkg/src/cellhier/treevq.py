"""Tree-structured vector quantisation over a binary codebook.

Level ``h`` (1-based) holds ``2**h`` code vectors indexed ``0 .. 2**h - 1``;
the children of node ``j`` are ``2j`` and ``2j + 1``. A vector is routed greedily
from the root pair downward, comparing only the two children of the node
chosen one level up, by cosine distance ``1 - cos``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import ZeroNormError


@dataclass
class TreeCodebook:
    """Code vectors per level. With ``flat=True`` there is a single unmasked level."""

    levels: list[np.ndarray]
    flat: bool = False

    def __post_init__(self):
        self.levels = [np.asarray(level, dtype=np.float64) for level in self.levels]
        if not self.levels:
            raise ValueError("a codebook needs at least one level")
        d = self.levels[0].shape[1]
        if self.flat and len(self.levels) != 1:
            raise ValueError("a flat codebook has exactly one level")
        for h, level in enumerate(self.levels, start=1):
            if level.ndim != 2 or level.shape[1] != d:
                raise ValueError(f"level {h} must be a 2-D array with {d} columns")
            if not self.flat and level.shape[0] != 2**h:
                raise ValueError(f"level {h} must hold {2 ** h} vectors, got {level.shape[0]}")
            if not np.all(np.isfinite(level)):
                raise ValueError(f"level {h} has non-finite entries")
            if np.any(np.linalg.norm(level, axis=1) == 0):
                raise ValueError(f"level {h} has a zero vector")

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    def level_sizes(self) -> list[int]:
        return [level.shape[0] for level in self.levels]

    def copy(self) -> "TreeCodebook":
        return TreeCodebook([level.copy() for level in self.levels], self.flat)


@dataclass(frozen=True)
class QuantizationPath:
    indices: tuple[int, ...]
    distances: tuple[float, ...]

    def is_valid(self, codebook: TreeCodebook | None = None) -> bool:
        if codebook is not None:
            if len(self.indices) != codebook.depth:
                return False
            sizes = codebook.level_sizes()
            if any(not 0 <= j < s for j, s in zip(self.indices, sizes)):
                return False
            if codebook.flat:
                return True
        return all(child // 2 == parent for parent, child in zip(self.indices, self.indices[1:]))


def init_codebook(depth: int, dim: int, seed: int = 0) -> TreeCodebook:
    """Unit-norm Gaussian codes, deterministic per seed."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    rng = np.random.default_rng([seed, depth, dim])
    levels = []
    for h in range(1, depth + 1):
        v = rng.standard_normal((2**h, dim))
        levels.append(v / np.linalg.norm(v, axis=1, keepdims=True))
    return TreeCodebook(levels)


def init_refined_codebook(depth: int, dim: int, seed: int = 0, noise: float = 0.3) -> TreeCodebook:
    """Codes where each child is its parent plus Gaussian noise, renormalised.

    Level ``h`` does not depend on ``depth``, so deeper trees refine shallower ones.
    """
    rng = np.random.default_rng([seed, dim])
    v = rng.standard_normal((2, dim))
    levels = [v / np.linalg.norm(v, axis=1, keepdims=True)]
    for _ in range(2, depth + 1):
        parent = np.repeat(levels[-1], 2, axis=0)
        child = parent + noise * rng.standard_normal(parent.shape)
        levels.append(child / np.linalg.norm(child, axis=1, keepdims=True))
    return TreeCodebook(levels)


def flat_codebook(depth: int, dim: int, seed: int = 0) -> TreeCodebook:
    """A single level of ``2**depth`` unit codes (the non-hierarchical baseline)."""
    rng = np.random.default_rng([seed, depth, dim, 1])
    v = rng.standard_normal((2**depth, dim))
    return TreeCodebook([v / np.linalg.norm(v, axis=1, keepdims=True)], flat=True)


def _unit(m: np.ndarray, what: str = "row") -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=-1)
    zero = np.flatnonzero(np.atleast_1d(norms) == 0)
    if zero.size:
        raise ZeroNormError(int(zero[0]), what)
    return m / norms[..., None], norms


def route_many(points: np.ndarray, codebook: TreeCodebook) -> tuple[np.ndarray, np.ndarray]:
    """Route each row; returns ``(indices, distances)``, both ``n x depth``."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    up, _ = _unit(p)
    n = up.shape[0]
    idx = np.zeros((n, codebook.depth), dtype=np.int64)
    dist = np.zeros((n, codebook.depth))
    if codebook.flat:
        ue, _ = _unit(codebook.levels[0], "code")
        d_all = 1.0 - up @ ue.T
        idx[:, 0] = np.argmin(d_all, axis=1)
        dist[:, 0] = d_all[np.arange(n), idx[:, 0]]
        return idx, dist
    parent = np.zeros(n, dtype=np.int64)
    for h, level in enumerate(codebook.levels):
        ue, _ = _unit(level, "code")
        left, right = 2 * parent, 2 * parent + 1
        d_left = 1.0 - np.einsum("ij,ij->i", up, ue[left])
        d_right = 1.0 - np.einsum("ij,ij->i", up, ue[right])
        take_right = d_right < d_left  # ties go to the lower index
        parent = np.where(take_right, right, left)
        idx[:, h] = parent
        dist[:, h] = np.where(take_right, d_right, d_left)
    return idx, dist


def route(p: np.ndarray, codebook: TreeCodebook) -> QuantizationPath:
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    if not np.any(p):
        raise ZeroNormError(0, "input vector")
    idx, dist = route_many(p, codebook)
    return QuantizationPath(tuple(int(j) for j in idx[0]), tuple(float(v) for v in dist[0]))


def _cos_grads(up, np_, uq, nq):
    """Cosine between row pairs and its gradients w.r.t. each unnormalised side."""
    c = np.einsum("ij,ij->i", up, uq)
    grad_p = (uq - c[:, None] * up) / np_[:, None]
    grad_q = (up - c[:, None] * uq) / nq[:, None]
    return c, grad_p, grad_q


def symmetric_vq_terms(p, q, p_frozen, q_frozen, eta: float) -> tuple[float, float]:
    """Values of the forward and reverse terms with explicit frozen copies.

    The forward term ``1 - cos(q_frozen, p)`` sees only the live ``p``; the reverse
    term ``eta * (1 - cos(q, p_frozen))`` sees only the live ``q``. Differencing
    with respect to the live arguments gives the stop-gradient derivatives.
    """

    def cos(a, b):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    return 1.0 - cos(q_frozen, p), eta * (1.0 - cos(q, p_frozen))


class VqLossResult(NamedTuple):
    loss: float
    grad_p: np.ndarray
    grad_nodes: dict[tuple[int, int], np.ndarray]


def symmetric_vq_loss(p, path: QuantizationPath, codebook: TreeCodebook, eta: float = 1.0) -> VqLossResult:
    """Level-averaged symmetric loss of one vector along its path.

    ``grad_nodes`` maps ``(level, index)`` (level 1-based) to the gradient of the
    code vector; only the reverse term reaches the codebook and only the
    forward term reaches ``p``.
    """
    if not path.is_valid(codebook):
        raise ValueError(f"path {path.indices} is not valid for this codebook")
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    up, np_ = _unit(p, "input vector")
    depth = codebook.depth
    loss = 0.0
    grad_p = np.zeros(p.shape[1])
    grads = {}
    for h, j in enumerate(path.indices, start=1):
        q = codebook.levels[h - 1][j : j + 1]
        uq, nq = _unit(q, "code")
        c, gp, gq = _cos_grads(up, np_, uq, nq)
        loss += (1.0 - c[0]) + eta * (1.0 - c[0])
        grad_p -= gp[0] / depth
        key = (h, j)
        grads[key] = grads.get(key, 0.0) - eta * gq[0] / depth
    return VqLossResult(float(loss / depth), grad_p, grads)


class TreeVqResult(NamedTuple):
    loss: float
    grads: dict[str, np.ndarray]
    grad_codebook: list[np.ndarray]
    paths: dict[str, np.ndarray]


def treevq_loss(projections: Mapping[str, np.ndarray], codebook: TreeCodebook, eta: float = 1.0) -> TreeVqResult:
    """Symmetric loss averaged over levels, samples and modalities.

    ``projections`` maps modality name to an ``N x d`` matrix. Returns the loss,
    per-modality gradients, per-level codebook gradients and the routed paths.
    """
    if not projections:
        raise ValueError("treevq_loss needs at least one modality")
    depth = codebook.depth
    n_mod = len(projections)
    grad_cb = [np.zeros_like(level) for level in codebook.levels]
    unit_codes = [_unit(level, "code") for level in codebook.levels]
    grads, paths = {}, {}
    total = 0.0
    for name, mat in projections.items():
        p = np.atleast_2d(np.asarray(mat, dtype=np.float64))
        n = p.shape[0]
        up, np_ = _unit(p, f"{name} row")
        idx, _ = route_many(p, codebook)
        paths[name] = idx
        scale = 1.0 / (n_mod * n * depth)
        g = np.zeros_like(p)
        for h in range(depth):
            uq_all, nq_all = unit_codes[h]
            j = idx[:, h]
            c, gp, gq = _cos_grads(up, np_, uq_all[j], nq_all[j])
            total += scale * (1.0 + eta) * float(np.sum(1.0 - c))
            g -= scale * gp
            np.add.at(grad_cb[h], j, -scale * eta * gq)
        grads[name] = g
    return TreeVqResult(total, grads, grad_cb, paths)


def treevq_surrogate(
    projections: Mapping[str, np.ndarray],
    frozen_projections: Mapping[str, np.ndarray],
    codebook: TreeCodebook,
    frozen_codebook: TreeCodebook,
    eta: float = 1.0,
) -> float:
    """Value of :func:`treevq_loss` with stop-gradient arguments taken from frozen copies.

    Routing uses the frozen projections. At ``frozen == live`` this equals the
    loss, and its derivatives with respect to the live arguments are exactly the
    stop-gradient gradients, so it is what finite differences should probe.
    """
    depth = codebook.depth
    total = 0.0
    for name, mat in projections.items():
        up, _ = _unit(np.atleast_2d(np.asarray(mat, dtype=np.float64)))
        frozen = np.atleast_2d(np.asarray(frozen_projections[name], dtype=np.float64))
        uf, _ = _unit(frozen)
        idx, _ = route_many(frozen, frozen_codebook)
        scale = 1.0 / (len(projections) * up.shape[0] * depth)
        for h in range(depth):
            q_live, _ = _unit(codebook.levels[h][idx[:, h]])
            q_frozen, _ = _unit(frozen_codebook.levels[h][idx[:, h]])
            forward = 1.0 - np.einsum("ij,ij->i", q_frozen, up)
            reverse = 1.0 - np.einsum("ij,ij->i", q_live, uf)
            total += scale * float(np.sum(forward + eta * reverse))
    return total


class LeafBound(NamedTuple):
    shared_leaf: bool
    alpha: float
    bound: float
    satisfied: bool
    premise_holds: bool
    cosine: float


def leaf_similarity_bound(p1, p2, codebook: TreeCodebook, tol: float = 1e-9) -> LeafBound:
    """Check ``cos(p1, p2) >= 2 alpha^2 - 1`` for two routed vectors.

    ``alpha`` is the common cosine to the shared final code; when the two
    cosines differ (or the leaves differ) the smaller one is used and
    ``premise_holds`` is False.
    """
    path1, path2 = route(p1, codebook), route(p2, codebook)
    shared = path1.indices == path2.indices
    q1 = codebook.levels[-1][path1.indices[-1]]
    q2 = codebook.levels[-1][path2.indices[-1]]
    u1, _ = _unit(np.asarray(p1, dtype=np.float64))
    u2, _ = _unit(np.asarray(p2, dtype=np.float64))
    a1 = float(u1 @ q1 / np.linalg.norm(q1))
    a2 = float(u2 @ q2 / np.linalg.norm(q2))
    premise = shared and abs(a1 - a2) <= tol
    alpha = a1 if premise else min(a1, a2)
    bound = 2.0 * alpha * alpha - 1.0
    cosine = float(u1 @ u2)
    return LeafBound(shared, alpha, bound, cosine >= bound - tol, premise, cosine)


def utilization(paths, codebook: TreeCodebook) -> list[float]:
    """Fraction of codes at each level used by at least one path."""
    sizes = codebook.level_sizes()
    rows = [p.indices if isinstance(p, QuantizationPath) else p for p in paths]
    if len(rows) == 0:
        return [0.0] * len(sizes)
    idx = np.asarray(rows, dtype=np.int64).reshape(-1, len(sizes))
    return [len(np.unique(idx[:, h])) / sizes[h] for h in range(len(sizes))]


def leaf_occupancy(paths, codebook: TreeCodebook) -> np.ndarray:
    """Number of paths ending in each final-level code."""
    counts = np.zeros(codebook.level_sizes()[-1], dtype=np.int64)
    for p in paths:
        leaf = p.indices[-1] if isinstance(p, QuantizationPath) else p[-1]
        counts[int(leaf)] += 1
    return counts


def mean_leaf_diameter(points: np.ndarray, codebook: TreeCodebook) -> float:
    """Average over points of the largest angle between the point's leaf-mates.

    Singleton leaves contribute 0.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    up, _ = _unit(p)
    idx, _ = route_many(p, codebook)
    leaves = idx[:, -1]
    total = 0.0
    for leaf in np.unique(leaves):
        members = up[leaves == leaf]
        if members.shape[0] < 2:
            continue
        cos = np.clip(members @ members.T, -1.0, 1.0)
        total += members.shape[0] * float(np.arccos(cos.min()))
    return total / p.shape[0]
