"""Command-line entry point: ``cellhier <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .context import build_synthetic_context_graph, load_context_graph, save_context_graph
from .data import (
    DEFAULT_PROFILE,
    apply_placeholder,
    generate_synthetic,
    load_dataset,
    load_profile,
    replace_modality,
    save_dataset,
)
from .downstream import probe
from .exceptions import DatasetError, DisconnectedNodesError, ZeroNormError
from .experiments import format_table, probe_labels, run_ablation, summarize, write_rows_csv
from .propagation import build_knn_graph, propagate
from .trainer import (
    ABLATION_MODES,
    TrainConfig,
    embed,
    gradcheck,
    init_params,
    load_checkpoint,
    make_batch,
    prepare,
    save_checkpoint,
    train_prepared,
)
from .treevq import leaf_occupancy, route_many, utilization

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- training flags shared by pretrain / gradcheck / ablate ------------------------

_FLAG_HELP = {
    "lambda1": "weight of the alignment losses",
    "lambda2": "weight of the quantisation loss",
    "eta": "weight of the reverse quantisation term",
    "temperature": "InfoNCE temperature",
    "k": "neighbours per node in the similarity graph",
    "iterations": "propagation iterations",
    "walk_length": "context walk length",
    "depth": "codebook tree depth",
    "dim": "shared latent dimension",
    "learning_rate": "Adam learning rate",
    "weight_decay": "L2 weight decay",
    "steps": "optimisation steps",
    "batch_size": "molecules per batch",
    "seed": "random seed",
    "ablation_mode": f"one of {', '.join(ABLATION_MODES)}",
    "similarity_modality": "modality used for the similarity graph (default: first molecular)",
}


def _flag_type(name):
    default = getattr(TrainConfig(), name)
    if isinstance(default, bool):
        return None
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_train_flags(parser, overrides=None):
    """Add one flag per TrainConfig field; unset flags stay out of the namespace."""
    overrides = overrides or {}
    group = parser.add_argument_group("training")
    group.add_argument("--config", help="JSON file of training settings; flags take precedence (default: none)")
    for f in fields(TrainConfig):
        default = overrides.get(f.name, getattr(TrainConfig(), f.name))
        kwargs = {
            "type": _flag_type(f.name),
            "default": argparse.SUPPRESS,
            "dest": f"cfg_{f.name}",
            "metavar": f.name.upper(),
        }
        if f.name == "ablation_mode":
            kwargs["choices"] = ABLATION_MODES
        text = _FLAG_HELP[f.name]
        if f.name != "similarity_modality":
            text = f"{text} (default: {default})"
        group.add_argument("--" + f.name.replace("_", "-"), help=text, **kwargs)


def _train_config(args, overrides=None) -> TrainConfig:
    """Built-in defaults, then command overrides, then ``--config``, then explicit flags."""
    values = TrainConfig().to_dict()
    values.update(overrides or {})
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            from_file = json.load(fh)
        if not isinstance(from_file, dict):
            raise UsageError("--config must contain a JSON object")
        unknown = set(from_file) - set(values)
        if unknown:
            raise UsageError(f"unknown keys in --config: {sorted(unknown)}")
        values.update(from_file)
    for key, value in vars(args).items():
        if key.startswith("cfg_"):
            values[key[4:]] = value
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    profile = load_profile(args.profile) if args.profile else DEFAULT_PROFILE
    ds = generate_synthetic(args.n, profile, latent_dim=args.latent_dim, noise_scale=args.noise, seed=args.seed)
    save_dataset(ds, args.out)
    view = apply_placeholder(ds)
    rates = " ".join(f"{n}={1.0 - view.column(n).mean():.3f}" for n in ds.external_names)
    print(f"gen-data: wrote {ds.n} records, {len(ds.specs)} modalities to {args.out}; missing {rates}")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    ds = load_dataset(args.data)
    graph = build_synthetic_context_graph(ds, seed=args.seed)
    save_context_graph(graph, args.out)
    print(f"build-graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges -> {args.out}")
    return EXIT_OK


def cmd_impute(args) -> int:
    ds = load_dataset(args.data)
    if args.modality not in ds.modality_names:
        raise DatasetError(f"unknown modality {args.modality!r}")
    if ds.spec(args.modality).is_molecular:
        raise DatasetError(f"{args.modality!r} is molecular and never missing")
    sim = args.similarity_modality or ds.molecular_names[0]
    if sim not in ds.modality_names:
        raise DatasetError(f"unknown similarity modality {sim!r}")
    view = apply_placeholder(ds)
    graph = build_knn_graph(view.matrices[sim], min(args.k, ds.n - 1))
    result = propagate(view.matrices[args.modality], view.column(args.modality), graph, args.iters)
    save_dataset(replace_modality(ds, args.modality, result.matrix), args.out)
    sidecar = Path(str(args.out) + ".residuals.json")
    with open(sidecar, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"modality": args.modality, "residuals": [float(r) for r in result.residuals]}, fh)
        fh.write("\n")
    last = result.residuals[-1] if result.residuals else 0.0
    missing = int((~view.column(args.modality).astype(bool)).sum())
    print(f"impute: {args.modality} filled {missing} rows in {len(result.residuals)} iterations, final residual {last:.3e}")
    return EXIT_OK


def _load_graph(path, ds, config):
    return load_context_graph(path) if path else build_synthetic_context_graph(ds, config.seed)


def cmd_pretrain(args) -> int:
    config = _train_config(args)
    ds = load_dataset(args.data)
    data = prepare(ds, config, _load_graph(args.graph, ds, config))
    params, history = train_prepared(data, config)
    save_checkpoint(args.out, params, config)
    if args.history:
        with open(args.history, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "total", "cpr", "sca_ia", "sca_da", "treevq"])
            for r in history:
                writer.writerow([r.step] + [repr(float(v)) for v in (r.total, r.cpr, r.sca_ia, r.sca_da, r.treevq)])
    print(f"pretrain: {len(history)} steps, loss {history[0].total:.6g} -> {history[-1].total:.6g}; checkpoint {args.out}")
    return EXIT_OK


GRADCHECK_DEFAULTS = {"dim": 4, "depth": 3, "batch_size": 6, "walk_length": 3, "k": 3}


def cmd_gradcheck(args) -> int:
    config = _train_config(args, GRADCHECK_DEFAULTS)
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds = generate_synthetic(max(config.batch_size, 8), seed=config.seed)
    data = prepare(ds, config)
    params = init_params(ds, config)
    rng = np.random.default_rng([config.seed, 61])
    size = min(config.batch_size, ds.n)
    indices = np.sort(rng.choice(ds.n, size=size, replace=False))
    batch = make_batch(data, indices, config, rng)
    report = gradcheck(params, batch, config, args.step)
    blocks = " ".join(f"{b}={e:.2e}" for b, e in sorted(report.errors.items()))
    print(f"gradcheck: max relative error {report.max_error:.3e} (worst {report.worst_block}); {blocks}")
    if not report.max_error < args.threshold:
        raise NumericFailure(f"gradient error {report.max_error:.3e} exceeds threshold {args.threshold:g}")
    return EXIT_OK


def cmd_embed(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    z = embed(ds, params)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"z{j}" for j in range(z.shape[1])])
        for rec, row in zip(ds.records, z):
            writer.writerow([rec.id] + [repr(float(v)) for v in row])
    print(f"embed: {z.shape[0]} x {z.shape[1]} embeddings -> {args.out}")
    return EXIT_OK


def _read_embeddings(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["id"]:
        raise DatasetError("embedding CSV must start with an 'id' header column")
    try:
        return [r[0] for r in rows[1:]], np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise DatasetError(f"embedding CSV: {exc}") from exc


def cmd_probe(args) -> int:
    ds = load_dataset(args.data)
    if args.embeddings:
        ids, z = _read_embeddings(args.embeddings)
        order = {rec.id: i for i, rec in enumerate(ds.records)}
        if sorted(ids) != sorted(order):
            raise DatasetError("embedding ids do not match the dataset records")
        z = z[np.argsort([order[i] for i in ids])]
    elif args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        z = embed(ds, params)
    else:
        raise UsageError("probe needs --embeddings or --checkpoint")
    keep, y = probe_labels(ds, args.task)
    metric = probe(z[keep], y, args.task, args.seed)
    name = "AUC" if args.task == "binary" else "MAE"
    print(f"probe: {args.task} {name} {metric:.6f} on {len(keep)} labelled molecules")
    return EXIT_OK


def cmd_inspect_tree(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    view = apply_placeholder(ds)
    points = []
    for name in ds.modality_names:
        if name not in params.projectors:
            continue
        rows = view.column(name).astype(bool)
        if rows.any():
            x = view.matrices[name][rows]
            points.append(x @ params.projectors[name].weight.T + params.projectors[name].bias)
    idx, _ = route_many(np.vstack(points), params.codebook)
    paths = [tuple(r) for r in idx]
    util = utilization(paths, params.codebook)
    occupancy = leaf_occupancy(paths, params.codebook)
    for h, (u, size) in enumerate(zip(util, params.codebook.level_sizes()), start=1):
        print(f"level {h}: {size} codes, utilization {u:.3f}")
    top = max(int(occupancy.max()), 1)
    for leaf, count in enumerate(occupancy):
        print(f"leaf {leaf:>4}: {int(count):>6} {'#' * int(round(40 * count / top))}")
    used = int((occupancy > 0).sum())
    print(f"inspect-tree: {len(paths)} projections, {used}/{occupancy.size} leaves occupied")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _train_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad or not modes:
        raise UsageError(f"unknown ablation modes {bad}; choose from {', '.join(ABLATION_MODES)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    ds = load_dataset(args.data)
    graph = _load_graph(args.graph, ds, config)
    seeds = range(config.seed, config.seed + args.seeds)
    rows = run_ablation(ds, modes, seeds, config, graph, args.task)
    print(format_table(summarize(rows)))
    if args.out:
        write_rows_csv(rows, args.out)
    print(f"ablate: {len(rows)} runs over {len(modes)} modes x {args.seeds} seeds")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cellhier", description="Pretraining with cell-aware hierarchical codebooks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic multi-modal dataset")
    p.add_argument("--n", type=int, default=256, help="number of molecules (default: 256)")
    p.add_argument("--profile", help="JSON modality profile (default: built-in profile)")
    p.add_argument("--latent-dim", type=int, default=8, help="latent factors (default: 8)")
    p.add_argument("--noise", type=float, default=0.5, help="observation noise scale (default: 0.5)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", required=True, help="output dataset file (required)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-graph", help="build the context graph for a dataset")
    p.add_argument("--data", required=True, help="dataset file (required)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", required=True, help="output graph file (required)")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("impute", help="fill one missing modality by feature propagation")
    p.add_argument("--data", required=True, help="dataset file (required)")
    p.add_argument("--modality", required=True, help="external modality to fill (required)")
    p.add_argument("--k", type=int, default=10, help="neighbours per node (default: 10)")
    p.add_argument("--iters", type=int, default=5, help="propagation iterations (default: 5)")
    p.add_argument("--similarity-modality", help="modality for the similarity graph (default: first molecular)")
    p.add_argument("--out", required=True, help="output dataset file; residuals go to OUT.residuals.json (required)")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("pretrain", help="pretrain and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset file (required)")
    p.add_argument("--graph", help="context graph file (default: built from the data)")
    p.add_argument("--out", required=True, help="output checkpoint file (required)")
    p.add_argument("--history", help="CSV of per-step losses (default: not written)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--data", help="dataset file (default: 8 synthetic molecules)")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step (default: 1e-05)")
    p.add_argument("--threshold", type=float, default=1e-4, help="failure threshold (default: 0.0001)")
    _add_train_flags(p, GRADCHECK_DEFAULTS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("embed", help="write frozen embeddings as CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint file (required)")
    p.add_argument("--data", required=True, help="dataset file (required)")
    p.add_argument("--out", required=True, help="output CSV (required)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="score embeddings with a linear probe")
    p.add_argument("--data", required=True, help="dataset file providing labels (required)")
    p.add_argument("--embeddings", help="embedding CSV from 'embed' (default: none)")
    p.add_argument("--checkpoint", help="checkpoint to embed with instead of --embeddings (default: none)")
    p.add_argument("--task", choices=("binary", "regression"), default="binary",
                   help="binary splits real labels at the median (default: binary)")
    p.add_argument("--seed", type=int, default=0, help="split seed (default: 0)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("inspect-tree", help="codebook utilisation and leaf occupancy")
    p.add_argument("--checkpoint", required=True, help="checkpoint file (required)")
    p.add_argument("--data", required=True, help="dataset file (required)")
    p.set_defaults(func=cmd_inspect_tree)

    p = sub.add_parser("ablate", help="pretrain and probe under several ablation modes")
    p.add_argument("--data", required=True, help="dataset file (required)")
    p.add_argument("--graph", help="context graph file (default: built from the data)")
    p.add_argument("--modes", default=",".join(ABLATION_MODES), help=f"comma-separated modes (default: {','.join(ABLATION_MODES)})")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed (default: 5)")
    p.add_argument("--task", choices=("binary", "regression"), default="binary", help="probe task (default: binary)")
    p.add_argument("--out", help="CSV of per-run metrics (default: not written)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cellhier: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, FloatingPointError, ZeroNormError) as exc:
        print(f"cellhier: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, DisconnectedNodesError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"cellhier: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
