"""Scikit-learn style wrapper around pretraining and frozen embedding."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .context import ContextGraph
from .data import Dataset
from .trainer import TrainConfig, embed, prepare, train_prepared

_DEFAULTS = TrainConfig()


class CellAwarePretrainer(TransformerMixin, BaseEstimator):
    """Pretrain projectors, codebook and decoders on a :class:`Dataset`.

    ``fit`` runs imputation and Adam; ``transform`` returns frozen embeddings
    (raw first molecular modality followed by every molecular projection).
    Hyperparameters mirror :class:`TrainConfig`.
    """

    def __init__(
        self,
        lambda1=_DEFAULTS.lambda1,
        lambda2=_DEFAULTS.lambda2,
        eta=_DEFAULTS.eta,
        temperature=_DEFAULTS.temperature,
        k=_DEFAULTS.k,
        iterations=_DEFAULTS.iterations,
        walk_length=_DEFAULTS.walk_length,
        depth=_DEFAULTS.depth,
        dim=_DEFAULTS.dim,
        learning_rate=_DEFAULTS.learning_rate,
        weight_decay=_DEFAULTS.weight_decay,
        steps=_DEFAULTS.steps,
        batch_size=_DEFAULTS.batch_size,
        seed=_DEFAULTS.seed,
        ablation_mode=_DEFAULTS.ablation_mode,
        similarity_modality=_DEFAULTS.similarity_modality,
    ):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.eta = eta
        self.temperature = temperature
        self.k = k
        self.iterations = iterations
        self.walk_length = walk_length
        self.depth = depth
        self.dim = dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.ablation_mode = ablation_mode
        self.similarity_modality = similarity_modality

    def to_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def fit(self, X: Dataset, y=None, graph: ContextGraph | None = None):
        if not isinstance(X, Dataset):
            raise TypeError("CellAwarePretrainer.fit expects a Dataset")
        config = self.to_config()
        self.data_ = prepare(X, config, graph)
        self.params_, self.history_ = train_prepared(self.data_, config)
        self.n_features_out_ = embed(X, self.params_).shape[1]
        return self

    def transform(self, X: Dataset) -> np.ndarray:
        check_is_fitted(self, "params_")
        return embed(X, self.params_)
