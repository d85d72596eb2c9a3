"""Joint pretraining objective, optimiser, gradient checking and checkpoints.

The objective is ``cpr + lambda1 * (ia + da) + lambda2 * treevq`` over a
mini-batch. Every parameter is an affine map or a code vector, so the full
gradient is assembled by hand from the per-loss gradients.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from os import PathLike
from typing import NamedTuple

import numpy as np

from .alignment import ProjectedBatch, Projector, ScaConfig, affine_backward, project, sca_loss
from .context import (
    ContextGraph,
    Decoder,
    WalkPath,
    build_synthetic_context_graph,
    random_walk,
    trivial_walk,
    weighted_reconstruction,
)
from .data import Dataset, apply_placeholder
from .exceptions import TrainingDivergedError
from .propagation import build_knn_graph, neighbor_mean_impute, propagate
from .treevq import TreeCodebook, flat_codebook, init_codebook, treevq_loss, treevq_surrogate

logger = logging.getLogger(__name__)

ABLATION_MODES = (
    "full",
    "zero_impute",
    "random_impute",
    "neighbor_mean",
    "no_sca",
    "no_da",
    "no_ia",
    "no_treevq",
    "flat_vq",
    "no_cpr",
    "no_walk",
)


@dataclass
class TrainConfig:
    lambda1: float = 10.0
    lambda2: float = 0.1
    eta: float = 1.0
    temperature: float = 0.1
    k: int = 10
    iterations: int = 5
    walk_length: int = 4
    depth: int = 6
    dim: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-8
    steps: int = 200
    batch_size: int = 64
    seed: int = 0
    ablation_mode: str = "full"
    similarity_modality: str | None = None

    def __post_init__(self):
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.ablation_mode!r}; choose from {ABLATION_MODES}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if min(self.lambda1, self.lambda2, self.eta, self.learning_rate, self.weight_decay) < 0:
            raise ValueError("weights, eta and learning rate must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.k < 1 or self.iterations < 1 or self.walk_length < 0 or self.depth < 1 or self.dim < 2:
            raise ValueError("k, iterations, depth must be >= 1, walk_length >= 0, dim >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


class LossReport(NamedTuple):
    total: float
    cpr: float
    sca_ia: float
    sca_da: float
    treevq: float
    step: int = 0


@dataclass
class ModelParams:
    projectors: dict[str, Projector]
    codebook: TreeCodebook
    decoders: dict[str, Decoder]

    @property
    def dim(self) -> int:
        return self.codebook.dim

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array; updating them updates the model."""
        out = {}
        for name, p in self.projectors.items():
            out[f"projector/{name}/weight"] = p.weight
            out[f"projector/{name}/bias"] = p.bias
        for h, level in enumerate(self.codebook.levels, start=1):
            out[f"codebook/{h}"] = level
        for name, dec in self.decoders.items():
            out[f"decoder/{name}/weight"] = dec.weight
            out[f"decoder/{name}/bias"] = dec.bias
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Projector(p.weight.copy(), p.bias.copy(), p.modality_name) for n, p in self.projectors.items()},
            self.codebook.copy(),
            {n: Decoder(d.weight.copy(), d.bias.copy(), d.target_modality) for n, d in self.decoders.items()},
        )


def block_of(key: str) -> str:
    return {"projector": "projectors", "codebook": "codebook", "decoder": "decoders"}[key.split("/", 1)[0]]


def init_params(dataset: Dataset, config: TrainConfig) -> ModelParams:
    d = config.dim
    rng = np.random.default_rng([config.seed, 11])
    projectors, decoders = {}, {}
    for spec in dataset.specs:
        w = rng.standard_normal((d, spec.dim)) / np.sqrt(spec.dim)
        # a nonzero bias keeps projections of zero placeholders away from the origin
        b = 0.1 * rng.standard_normal(d)
        projectors[spec.name] = Projector(w, b, spec.name)
    for spec in dataset.specs:
        w = rng.standard_normal((spec.dim, d)) / np.sqrt(d)
        decoders[spec.name] = Decoder(w, np.zeros(spec.dim), spec.name)
    if config.ablation_mode == "flat_vq":
        codebook = flat_codebook(config.depth, d, config.seed)
    else:
        codebook = init_codebook(config.depth, d, config.seed)
    return ModelParams(projectors, codebook, decoders)


# -- data preparation -------------------------------------------------------------


@dataclass
class PreparedData:
    """Dense matrices, masks, imputed features and context for one run."""

    dataset: Dataset
    raw: dict[str, np.ndarray]
    aug: dict[str, np.ndarray]
    observed: dict[str, np.ndarray]
    residuals: dict[str, list[float]]
    graph: ContextGraph
    row_of: dict[str, int]
    bucket_targets: dict[str, dict[str, np.ndarray]]

    @property
    def molecular_names(self) -> list[str]:
        return self.dataset.molecular_names

    @property
    def external_names(self) -> list[str]:
        return self.dataset.external_names

    @property
    def n(self) -> int:
        return self.dataset.n

    def domain(self, name: str) -> str:
        return self.dataset.spec(name).value_domain


def _random_impute(x, observed, binary, rng):
    out = x.copy()
    miss = ~observed
    if not miss.any() or not observed.any():
        return out
    mean = x[observed].mean(axis=0)
    if binary:
        out[miss] = (rng.random((miss.sum(), x.shape[1])) < mean).astype(np.float64)
    else:
        std = x[observed].std(axis=0)
        out[miss] = mean + std * rng.standard_normal((miss.sum(), x.shape[1]))
    return out


def impute(dataset: Dataset, config: TrainConfig):
    """Fill missing external features according to ``config.ablation_mode``.

    Returns ``(raw, augmented, observed, residuals)`` keyed by modality.
    """
    view = apply_placeholder(dataset)
    raw = view.matrices
    observed = {name: view.column(name).astype(bool) for name in view.names}
    aug = {name: raw[name].copy() for name in view.names}
    residuals = {}
    mode = config.ablation_mode
    if not dataset.external_names or mode == "zero_impute":
        return raw, aug, observed, residuals
    if mode == "random_impute":
        for idx, name in enumerate(dataset.external_names):
            rng = np.random.default_rng([config.seed, 21, idx])
            aug[name] = _random_impute(raw[name], observed[name], dataset.spec(name).value_domain == "binary", rng)
        return raw, aug, observed, residuals
    sim_name = config.similarity_modality or dataset.molecular_names[0]
    graph = build_knn_graph(raw[sim_name], min(config.k, dataset.n - 1))
    for name in dataset.external_names:
        if mode == "neighbor_mean":
            aug[name] = neighbor_mean_impute(raw[name], observed[name], graph)
        else:
            result = propagate(raw[name], observed[name], graph, config.iterations)
            aug[name] = result.matrix
            residuals[name] = result.residuals
    return raw, aug, observed, residuals


def prepare(dataset: Dataset, config: TrainConfig, graph: ContextGraph | None = None) -> PreparedData:
    """Impute missing modalities and attach the context graph (built if not given)."""
    if not dataset.molecular_names:
        raise ValueError("the dataset needs at least one molecular modality")
    raw, aug, observed, residuals = impute(dataset, config)
    if graph is None:
        graph = build_synthetic_context_graph(dataset, config.seed)
    row_of = {rec.id: i for i, rec in enumerate(dataset.records)}
    missing = [rec.id for rec in dataset.records if rec.id not in graph]
    if missing:
        raise ValueError(f"context graph lacks molecule nodes such as {missing[:3]}")
    bucket_targets: dict[str, dict[str, np.ndarray]] = {}
    for node in graph.nodes:
        if node.kind == "molecule" or node.modality is None or node.modality not in raw:
            continue
        names, _ = graph.neighbors(node.id)
        rows = [row_of[m] for m in names if m in row_of and observed[node.modality][row_of[m]]]
        if rows:
            bucket_targets.setdefault(node.modality, {})[node.id] = raw[node.modality][rows].mean(axis=0)
    return PreparedData(dataset, raw, aug, observed, residuals, graph, row_of, bucket_targets)


@dataclass
class Batch:
    data: PreparedData
    indices: np.ndarray
    walks: list[WalkPath]


def make_batch(data: PreparedData, indices, config: TrainConfig, rng) -> Batch:
    indices = np.asarray(indices, dtype=np.int64)
    ids = [data.dataset.records[i].id for i in indices]
    if config.ablation_mode == "no_walk":
        walks = [trivial_walk(s, config.walk_length) for s in ids]
    else:
        walks = [random_walk(data.graph, s, config.walk_length, rng) for s in ids]
    return Batch(data, indices, walks)


# -- objective ------------------------------------------------------------------------


class TotalLossResult(NamedTuple):
    report: LossReport
    grads: dict[str, np.ndarray]
    paths: dict[str, np.ndarray]


class _GradSink:
    """Accumulates affine-layer gradients keyed like :meth:`ModelParams.arrays`."""

    def __init__(self, params: ModelParams):
        self.grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}

    def affine(self, kind: str, name: str, x: np.ndarray, grad_out: np.ndarray, scale: float = 1.0):
        if scale == 0.0:
            return
        gw, gb = affine_backward(x, grad_out)
        self.grads[f"{kind}/{name}/weight"] += scale * gw
        self.grads[f"{kind}/{name}/bias"] += scale * gb


def _cpr_term(batch: Batch, params: ModelParams, sink: _GradSink) -> float:
    data = batch.data
    n_walks = len(batch.walks)
    row_weight: dict[int, float] = {}
    node_weight: dict[str, float] = {}
    for walk in batch.walks:
        for node, w in zip(*walk.visited):
            if node in data.row_of:
                r = data.row_of[node]
                row_weight[r] = row_weight.get(r, 0.0) + w / n_walks
            else:
                node_weight[node] = node_weight.get(node, 0.0) + w / n_walks
    loss = 0.0
    if row_weight:
        rows = np.fromiter(row_weight.keys(), dtype=np.int64)
        weights = np.fromiter(row_weight.values(), dtype=np.float64)
        n_targets = len(data.molecular_names) + sum(data.observed[c][rows].astype(np.int64) for c in data.external_names)
        share = weights / n_targets
        mol_inputs = {m: data.raw[m][rows] for m in data.molecular_names}
        anchor = sum(project(params.projectors[m], x) for m, x in mol_inputs.items())
        grad_anchor = np.zeros_like(anchor)
        for m in data.molecular_names:
            dec = params.decoders[m]
            pred = anchor @ dec.weight.T + dec.bias
            value, g = weighted_reconstruction(pred, mol_inputs[m], share, data.domain(m))
            loss += value
            sink.affine("decoder", m, anchor, g)
            grad_anchor += g @ dec.weight
        for m in data.molecular_names:
            sink.affine("projector", m, mol_inputs[m], grad_anchor)
        for c in data.external_names:
            keep = data.observed[c][rows]
            if not keep.any():
                continue
            x = data.raw[c][rows[keep]]
            loss += _reconstruct_through(params, c, x, x, share[keep], data.domain(c), sink)
    for c, centroids in data.bucket_targets.items():
        hits = [(node, node_weight[node]) for node in centroids if node in node_weight]
        if not hits:
            continue
        x = np.array([centroids[node] for node, _ in hits])
        w = np.array([w for _, w in hits])
        loss += _reconstruct_through(params, c, x, x, w, data.domain(c), sink)
    return loss


def _reconstruct_through(params, name, x, target, weights, domain, sink) -> float:
    proj, dec = params.projectors[name], params.decoders[name]
    p = project(proj, x)
    pred = p @ dec.weight.T + dec.bias
    value, g = weighted_reconstruction(pred, target, weights, domain)
    sink.affine("decoder", name, p, g)
    sink.affine("projector", name, x, g @ dec.weight)
    return value


def total_loss(
    batch: Batch, params: ModelParams, config: TrainConfig, frozen: ModelParams | None = None
) -> TotalLossResult:
    """Evaluate the joint objective on a batch with gradients for every parameter.

    With ``frozen`` given, stop-gradient arguments of the quantisation loss are
    evaluated under the frozen parameters instead (see :func:`treevq_surrogate`);
    the reported value then differentiates to the returned gradients.
    """
    data = batch.data
    idx = batch.indices
    if len(idx) < 2:
        raise ValueError("a batch needs at least two samples")
    if len(batch.walks) != len(idx):
        raise ValueError("one walk per batch sample is required")
    if params.codebook.flat != (config.ablation_mode == "flat_vq"):
        raise ValueError("codebook layout does not match the ablation mode")
    mode = config.ablation_mode
    sink = _GradSink(params)
    mol, ext = data.molecular_names, data.external_names
    x_mol = {m: data.raw[m][idx] for m in mol}
    x_cell = {c: data.raw[c][idx] for c in ext}
    x_aug = {c: data.aug[c][idx] for c in ext}
    p_mol = {m: project(params.projectors[m], x) for m, x in x_mol.items()}
    p_cell = {c: project(params.projectors[c], x) for c, x in x_cell.items()}
    p_aug = {c: project(params.projectors[c], x) for c, x in x_aug.items()}
    g_mol = {m: np.zeros_like(p) for m, p in p_mol.items()}
    g_cell = {c: np.zeros_like(p) for c, p in p_cell.items()}
    g_aug = {c: np.zeros_like(p) for c, p in p_aug.items()}

    ia = da = 0.0
    use_ia = mode not in ("no_sca", "no_ia")
    use_da = mode not in ("no_sca", "no_da")
    if ext and (use_ia or use_da):
        sca = sca_loss(ProjectedBatch(p_mol, p_cell, p_aug), ext, ScaConfig(config.temperature, use_da, use_ia))
        ia, da = sca.instance, sca.distribution
        for m in mol:
            g_mol[m] += config.lambda1 * sca.grads.molecular[m]
        for c in ext:
            g_cell[c] += config.lambda1 * sca.grads.cellular[c]
            g_aug[c] += config.lambda1 * sca.grads.augmented[c]

    vq = 0.0
    paths = {}
    if mode != "no_treevq":
        inputs = dict(p_mol)
        inputs.update({c: p_aug[c] for c in ext})
        tv = treevq_loss(inputs, params.codebook, config.eta)
        vq, paths = tv.loss, tv.paths
        if frozen is not None:
            frozen_inputs = {m: project(frozen.projectors[m], x_mol[m]) for m in mol}
            frozen_inputs.update({c: project(frozen.projectors[c], x_aug[c]) for c in ext})
            vq = treevq_surrogate(inputs, frozen_inputs, params.codebook, frozen.codebook, config.eta)
        for m in mol:
            g_mol[m] += config.lambda2 * tv.grads[m]
        for c in ext:
            g_aug[c] += config.lambda2 * tv.grads[c]
        for h, g in enumerate(tv.grad_codebook, start=1):
            sink.grads[f"codebook/{h}"] += config.lambda2 * g

    for m in mol:
        sink.affine("projector", m, x_mol[m], g_mol[m])
    for c in ext:
        sink.affine("projector", c, x_cell[c], g_cell[c])
        sink.affine("projector", c, x_aug[c], g_aug[c])

    cpr = 0.0 if mode == "no_cpr" else _cpr_term(batch, params, sink)
    total = cpr + config.lambda1 * (ia + da) + config.lambda2 * vq
    return TotalLossResult(LossReport(total, cpr, ia, da, vq), sink.grads, paths)


# -- optimisation -----------------------------------------------------------------


class Adam:
    """Adam with L2 weight decay added to the gradient (``decay`` keys only)."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(params if decay is None else decay)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for key, p in self.params.items():
            g = grads[key]
            if self.weight_decay and key in self.decay:
                g = g + self.weight_decay * p
            self.m[key] = self.b1 * self.m[key] + (1.0 - self.b1) * g
            self.v[key] = self.b2 * self.v[key] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[key] / c1) / (np.sqrt(self.v[key] / c2) + self.eps)


def batch_schedule(n: int, batch_size: int, steps: int, seed: int):
    """Yield index arrays: seeded permutations per epoch, short tails (< 2) dropped."""
    rng = np.random.default_rng([seed, 31])
    size = min(batch_size, n)
    produced = 0
    while produced < steps:
        perm = rng.permutation(n)
        for start in range(0, n, size):
            chunk = perm[start : start + size]
            if len(chunk) < 2:
                continue
            yield chunk
            produced += 1
            if produced == steps:
                return


def train_prepared(data: PreparedData, config: TrainConfig, params: ModelParams | None = None):
    """Run Adam on prepared data. Returns ``(params, history)``."""
    if data.n < 2:
        raise ValueError("training needs at least two molecules")
    params = init_params(data.dataset, config) if params is None else params
    arrays = params.arrays()
    # codebook vectors are scale-free under cosine; decaying them only shrinks norms
    decay = [k for k in arrays if not k.startswith("codebook/")]
    opt = Adam(arrays, config.learning_rate, weight_decay=config.weight_decay, decay=decay)
    history = []
    for step, indices in enumerate(batch_schedule(data.n, config.batch_size, config.steps, config.seed)):
        rng = np.random.default_rng([config.seed, 41, step])
        batch = make_batch(data, indices, config, rng)
        with np.errstate(over="ignore", invalid="ignore"):
            result = total_loss(batch, params, config)
        report = result.report._replace(step=step)
        if not np.isfinite(report.total):
            raise TrainingDivergedError(step, report.total)
        history.append(report)
        opt.step(result.grads)
    if history:
        logger.info("trained %d steps, final loss %.6g", len(history), history[-1].total)
    return params, history


def train(dataset: Dataset, config: TrainConfig, graph: ContextGraph | None = None):
    """Impute, then pretrain. Returns ``(params, history)``."""
    return train_prepared(prepare(dataset, config, graph), config)


def evaluate(data: PreparedData, params: ModelParams, config: TrainConfig, seed: int = 0) -> LossReport:
    """Objective over the whole dataset with walks drawn from a fixed seed."""
    rng = np.random.default_rng([seed, 51])
    batch = make_batch(data, np.arange(data.n), config, rng)
    return total_loss(batch, params, config).report


# -- gradient checking ------------------------------------------------------------


class GradcheckReport(NamedTuple):
    errors: dict[str, float]
    worst_block: str
    max_error: float


def gradcheck(params: ModelParams, batch: Batch, config: TrainConfig, step_size: float = 1e-5) -> GradcheckReport:
    """Compare analytic gradients with central differences, block by block.

    The differenced objective holds stop-gradient arguments at the unperturbed
    parameters, which is the function whose gradient the trainer follows.
    A block's error is ``max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-3)``.
    Routing and walks are held fixed by the batch, so the loss is smooth
    wherever no routing tie or variance hinge sits within ``step_size``.
    """
    analytic = total_loss(batch, params, config).grads
    frozen = params.copy()
    arrays = params.arrays()
    numeric = {k: np.zeros_like(v) for k, v in arrays.items()}
    for key, arr in arrays.items():
        flat = arr.reshape(-1)
        out = numeric[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step_size
            up = total_loss(batch, params, config, frozen).report.total
            flat[i] = orig - step_size
            down = total_loss(batch, params, config, frozen).report.total
            flat[i] = orig
            out[i] = (up - down) / (2.0 * step_size)
    diffs: dict[str, float] = {}
    scales: dict[str, float] = {}
    for key in arrays:
        block = block_of(key)
        diffs[block] = max(diffs.get(block, 0.0), float(np.max(np.abs(analytic[key] - numeric[key]), initial=0.0)))
        scale = max(float(np.max(np.abs(analytic[key]), initial=0.0)), float(np.max(np.abs(numeric[key]), initial=0.0)))
        scales[block] = max(scales.get(block, 0.0), scale)
    errors = {b: diffs[b] / max(scales[b], 1e-3) for b in diffs}
    worst = max(errors, key=errors.get)
    return GradcheckReport(errors, worst, errors[worst])


# -- downstream embedding -----------------------------------------------------------


def embed(dataset: Dataset, params: ModelParams) -> np.ndarray:
    """Frozen features: raw first molecular modality, then every molecular projection."""
    mol = dataset.molecular_names
    if not mol:
        raise ValueError("the dataset has no molecular modality")
    for name in mol:
        if name not in params.projectors:
            raise ValueError(f"no projector for molecular modality {name!r}")
    view = apply_placeholder(dataset)
    blocks = [view.matrices[mol[0]]]
    blocks += [project(params.projectors[m], view.matrices[m]) for m in mol]
    return np.hstack(blocks)


# -- checkpoints --------------------------------------------------------------------


def _floats(a: np.ndarray):
    return np.asarray(a, dtype=np.float64).tolist()


def params_to_json(params: ModelParams, config: TrainConfig | None = None) -> dict:
    return {
        "version": 1,
        "d": params.dim,
        "projectors": {n: {"w": _floats(p.weight), "b": _floats(p.bias)} for n, p in params.projectors.items()},
        "codebook": {
            "H": params.codebook.depth,
            "flat": params.codebook.flat,
            "levels": [_floats(level) for level in params.codebook.levels],
        },
        "decoders": {n: {"w": _floats(d.weight), "b": _floats(d.bias)} for n, d in params.decoders.items()},
        "config": None if config is None else config.to_dict(),
    }


def params_from_json(obj: dict) -> tuple[ModelParams, TrainConfig | None]:
    if obj.get("version") != 1:
        raise ValueError("unsupported checkpoint version")
    d = int(obj["d"])
    projectors = {
        n: Projector(np.array(v["w"], dtype=np.float64).reshape(d, -1), np.array(v["b"]), n)
        for n, v in obj["projectors"].items()
    }
    levels = [np.array(level, dtype=np.float64).reshape(-1, d) for level in obj["codebook"]["levels"]]
    codebook = TreeCodebook(levels, bool(obj["codebook"].get("flat", False)))
    decoders = {
        n: Decoder(np.array(v["w"], dtype=np.float64).reshape(-1, d), np.array(v["b"]), n)
        for n, v in obj["decoders"].items()
    }
    config = TrainConfig.from_dict(obj["config"]) if obj.get("config") else None
    return ModelParams(projectors, codebook, decoders), config


def save_checkpoint(path: str | PathLike, params: ModelParams, config: TrainConfig | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(params_to_json(params, config), fh, separators=(",", ":"), allow_nan=False)
        fh.write("\n")


def load_checkpoint(path: str | PathLike) -> tuple[ModelParams, TrainConfig | None]:
    with open(path, encoding="utf-8") as fh:
        return params_from_json(json.load(fh))
