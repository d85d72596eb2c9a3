"""Downstream evaluation of frozen embeddings: linear probe and score blending."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.linear_model import LinearRegression, LogisticRegression
from sklearn.metrics import mean_absolute_error, roc_auc_score
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

TASKS = ("binary", "regression")


class LinearProbe(BaseEstimator):
    """Single affine head on standardised features.

    ``task="binary"`` fits an L2-regularised logistic regression and scores by
    ROC AUC; ``task="regression"`` fits least squares and scores by negative MAE
    (so larger is better, as sklearn scorers expect).
    """

    def __init__(self, task="binary", C=1.0):
        self.task = task
        self.C = C

    def _head(self):
        if self.task == "binary":
            return LogisticRegression(C=self.C, max_iter=2000)
        if self.task == "regression":
            return LinearRegression()
        raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if self.task == "binary" and len(np.unique(y)) < 2:
            raise ValueError("binary probe needs both classes in the training labels")
        self.model_ = make_pipeline(StandardScaler(), self._head()).fit(X, y)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if self.task == "binary":
            return self.model_.decision_function(X)
        return self.model_.predict(X)

    def predict(self, X):
        scores = self.decision_function(X)
        return (scores > 0).astype(np.float64) if self.task == "binary" else scores

    def score(self, X, y):
        scores = self.decision_function(X)
        if self.task == "binary":
            return float(roc_auc_score(y, scores))
        return -float(mean_absolute_error(y, scores))


def probe(embeddings, labels, task: str = "binary", seed: int = 0, test_size: float = 0.2) -> float:
    """Fit a linear probe on an 80/20 split; return held-out AUC or MAE."""
    X = check_array(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if X.shape[0] != y.shape[0]:
        raise ValueError("embeddings and labels differ in length")
    if X.shape[0] < 20:
        raise ValueError("probe needs at least 20 samples")
    stratify = None
    if task == "binary":
        classes = np.unique(y)
        if classes.size < 2:
            raise ValueError("binary labels contain a single class")
        if not np.all(np.isin(classes, (0.0, 1.0))):
            raise ValueError("binary labels must be 0/1")
        stratify = y
    x_tr, x_te, y_tr, y_te = train_test_split(X, y, test_size=test_size, random_state=seed, stratify=stratify)
    head = LinearProbe(task).fit(x_tr, y_tr)
    if task == "binary":
        return head.score(x_te, y_te)
    return float(mean_absolute_error(y_te, head.predict(x_te)))


def binarize_labels(labels) -> np.ndarray:
    """Split real labels at their median into a balanced 0/1 task."""
    y = np.asarray(labels, dtype=np.float64)
    return (y > np.median(y)).astype(np.float64)


def ensemble_predict(y_model, y_baseline, gamma: float) -> np.ndarray:
    """``gamma * y_model + (1 - gamma) * y_baseline``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    a = np.asarray(y_model, dtype=np.float64)
    b = np.asarray(y_baseline, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("prediction arrays differ in length")
    return gamma * a + (1.0 - gamma) * b
