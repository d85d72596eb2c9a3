"""Ablation runs: pretrain under each mode, probe the frozen embeddings."""

from __future__ import annotations

import csv
import logging
from dataclasses import replace
from os import PathLike
from typing import NamedTuple, Sequence

import numpy as np

from .context import ContextGraph, build_synthetic_context_graph
from .data import Dataset
from .downstream import binarize_labels, probe
from .trainer import ABLATION_MODES, TrainConfig, embed, train

logger = logging.getLogger(__name__)


class AblationRow(NamedTuple):
    mode: str
    seed: int
    metric: float


class AblationSummary(NamedTuple):
    mode: str
    mean: float
    std: float
    delta: float


def probe_labels(dataset: Dataset, task: str) -> tuple[np.ndarray, np.ndarray]:
    """Rows with a label and the probe targets (median split for ``binary``)."""
    labels = dataset.labels()
    keep = np.flatnonzero(~np.isnan(labels))
    y = labels[keep]
    if task == "binary" and not np.all(np.isin(y, (0.0, 1.0))):
        y = binarize_labels(y)
    return keep, y


def run_ablation(
    dataset: Dataset,
    modes: Sequence[str] = ABLATION_MODES,
    seeds: Sequence[int] = range(5),
    config: TrainConfig = TrainConfig(),
    graph: ContextGraph | None = None,
    task: str = "binary",
) -> list[AblationRow]:
    """One pretraining run per (seed, mode); the probe split uses the same seed."""
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
    if graph is None:
        graph = build_synthetic_context_graph(dataset, config.seed)
    keep, y = probe_labels(dataset, task)
    rows = []
    for seed in seeds:
        for mode in modes:
            run = replace(config, seed=int(seed), ablation_mode=mode)
            params, _ = train(dataset, run, graph)
            metric = probe(embed(dataset, params)[keep], y, task, int(seed))
            logger.info("mode=%s seed=%d metric=%.6f", mode, seed, metric)
            rows.append(AblationRow(mode, int(seed), metric))
    return rows


def summarize(rows: Sequence[AblationRow], reference: str = "full") -> list[AblationSummary]:
    """Mean, population std and difference to the reference mode, in first-seen order."""
    order = list(dict.fromkeys(r.mode for r in rows))
    values = {m: np.array([r.metric for r in rows if r.mode == m]) for m in order}
    ref = float(values[reference].mean()) if reference in values else float("nan")
    return [AblationSummary(m, float(v.mean()), float(v.std()), float(v.mean()) - ref) for m, v in values.items()]


def format_table(summary: Sequence[AblationSummary]) -> str:
    lines = [f"{'mode':<14}{'mean':>10}{'std':>10}{'delta':>10}"]
    for s in summary:
        lines.append(f"{s.mode:<14}{s.mean:>10.4f}{s.std:>10.4f}{s.delta:>+10.4f}")
    return "\n".join(lines)


def write_rows_csv(rows: Sequence[AblationRow], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "seed", "metric"])
        for r in rows:
            writer.writerow([r.mode, r.seed, repr(float(r.metric))])
