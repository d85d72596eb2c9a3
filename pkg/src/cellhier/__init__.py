"""Molecular pretraining with imputed cellular context and a tree-structured codebook."""

from .alignment import Projector, info_nce, project, sca_loss, vicreg
from .context import ContextGraph, WalkPath, cpr_loss, random_walk
from .data import Dataset, ModalitySpec, MoleculeRecord, generate_synthetic, load_dataset, save_dataset
from .downstream import LinearProbe, ensemble_predict, probe
from .estimator import CellAwarePretrainer
from .propagation import FeaturePropagationImputer, build_knn_graph, dirichlet_solve_oracle, propagate
from .trainer import LossReport, ModelParams, TrainConfig, embed, gradcheck, total_loss, train
from .treevq import TreeCodebook, route, symmetric_vq_loss, treevq_loss

__version__ = "0.1.0"

__all__ = [
    "CellAwarePretrainer",
    "ContextGraph",
    "Dataset",
    "FeaturePropagationImputer",
    "LinearProbe",
    "LossReport",
    "ModalitySpec",
    "ModelParams",
    "MoleculeRecord",
    "Projector",
    "TrainConfig",
    "TreeCodebook",
    "WalkPath",
    "build_knn_graph",
    "cpr_loss",
    "dirichlet_solve_oracle",
    "embed",
    "ensemble_predict",
    "generate_synthetic",
    "gradcheck",
    "info_nce",
    "load_dataset",
    "probe",
    "project",
    "propagate",
    "random_walk",
    "route",
    "save_dataset",
    "sca_loss",
    "symmetric_vq_loss",
    "total_loss",
    "train",
    "treevq_loss",
    "vicreg",
]
