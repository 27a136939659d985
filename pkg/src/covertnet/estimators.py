"""scikit-learn style wrappers around the graph models.

The classifiers are transductive: ``X`` is the full T x N x F tensor (or
N x F for the static baselines) and ``y`` holds one entry per node, with -1
for nodes the fit must not see. ``predict`` scores every node of the graph
given at construction time.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .features import STANDARDIZED_COLUMNS
from .graph import SparseAdjacency
from .models import GraphInputs, ModelConfig, forward
from .train_eval import SplitMask, train


def check_tensor(X, n_nodes: int | None = None) -> np.ndarray:
    """Finite float64 array, promoted to T x N x F; a 2-D input is one window."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected a T x N x F or N x F array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    if n_nodes is not None and X.shape[1] != n_nodes:
        raise ValueError(f"input has {X.shape[1]} nodes, the graph has {n_nodes}")
    return X


def check_node_labels(y, n_nodes: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_nodes,):
        raise ValueError(f"{name} must have one entry per node ({n_nodes}), got shape {y.shape}")
    if not np.all(np.isin(y, (-1, 0, 1))):
        raise ValueError(f"{name} entries must be 0, 1 or -1 (ignored)")
    return y.astype(np.int64)


class FeatureStandardizer(TransformerMixin, BaseEstimator):
    """Z-scores per feature column over the training nodes and all windows.

    ``columns`` selects which feature indices are scaled (default: the
    numeric columns when ``feature_names`` is given, otherwise all).
    Columns that are constant on the training nodes map to 0.
    """

    def __init__(self, feature_names=None, columns=None):
        self.feature_names = feature_names
        self.columns = columns

    def _selected(self, F: int) -> np.ndarray:
        if self.columns is not None:
            return np.asarray(self.columns, dtype=np.int64)
        if self.feature_names is not None:
            if len(self.feature_names) != F:
                raise ValueError("feature_names length does not match the feature width")
            return np.array([j for j, n in enumerate(self.feature_names) if n in STANDARDIZED_COLUMNS],
                            dtype=np.int64)
        return np.arange(F)

    def fit(self, X, y=None, train_nodes=None):
        X = check_tensor(X)
        nodes = np.arange(X.shape[1]) if train_nodes is None else np.asarray(train_nodes, dtype=np.int64)
        if not len(nodes):
            raise ValueError("no training nodes")
        self.columns_ = self._selected(X.shape[2])
        block = X[:, nodes][:, :, self.columns_]
        self.mean_ = block.mean(axis=(0, 1))
        self.scale_ = block.std(axis=(0, 1))
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_tensor(X).copy()
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[2]}")
        cols = X[:, :, self.columns_]
        flat = self.scale_ <= 1e-12
        X[:, :, self.columns_] = np.where(flat, 0.0, (cols - self.mean_) / np.where(flat, 1.0, self.scale_))
        return X


class _GraphClassifier(ClassifierMixin, BaseEstimator):
    kind = ""

    def _config(self, n_features: int) -> ModelConfig:
        raise NotImplementedError

    def _inputs(self, X) -> GraphInputs:
        if not isinstance(self.adjacency, SparseAdjacency):
            raise ValueError("adjacency must be a raw SparseAdjacency")
        return GraphInputs(check_tensor(X, self.adjacency.n), self.adjacency)

    def fit(self, X, y, y_val=None):
        """Train on nodes with y >= 0; `y_val` (same layout) drives model selection."""
        inputs = self._inputs(X)
        n = inputs.n_nodes
        y = check_node_labels(y, n)
        train_idx = np.flatnonzero(y >= 0)
        if len(np.unique(y[train_idx])) < 2:
            raise ValueError("training labels must contain both classes")
        labels = y.copy()
        val_idx = np.zeros(0, dtype=np.int64)
        if y_val is not None:
            y_val = check_node_labels(y_val, n, "y_val")
            val_idx = np.flatnonzero(y_val >= 0)
            labels[val_idx] = y_val[val_idx]
        self.config_ = self._config(inputs.features.shape[2])
        result = train(self.config_, inputs, labels, SplitMask(train_idx, val_idx, np.zeros(0, dtype=np.int64)),
                       epochs=self.epochs, lr=self.lr, clip_norm=self.clip_norm)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = inputs.features.shape[2]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        logits = np.asarray(forward(self.config_, self.params_, self._inputs(X)))
        return logits[:, 1] - logits[:, 0]

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        logits = np.asarray(forward(self.config_, self.params_, self._inputs(X)))
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class STGNNClassifier(_GraphClassifier):
    """LSTM over windows, then two graph convolutions."""

    kind = "stgnn"

    def __init__(self, adjacency=None, hidden=32, gcn_hidden=16, attention_pooling=False, dropout=0.0,
                 epochs=200, lr=0.01, clip_norm=5.0, seed=0):
        self.adjacency = adjacency
        self.hidden = hidden
        self.gcn_hidden = gcn_hidden
        self.attention_pooling = attention_pooling
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.clip_norm = clip_norm
        self.seed = seed

    def _config(self, n_features):
        return ModelConfig("stgnn", n_features, self.hidden, self.gcn_hidden,
                           attention_pooling=self.attention_pooling, dropout=self.dropout, seed=self.seed)


class GCNClassifier(_GraphClassifier):
    """Two graph convolutions on the time-averaged features."""

    kind = "gcn"

    def __init__(self, adjacency=None, hidden=32, dropout=0.0, epochs=200, lr=0.01, clip_norm=5.0, seed=0):
        self.adjacency = adjacency
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.clip_norm = clip_norm
        self.seed = seed

    def _config(self, n_features):
        return ModelConfig("gcn", n_features, self.hidden, dropout=self.dropout, seed=self.seed)


class GATClassifier(_GraphClassifier):
    """Two attention layers on the time-averaged features."""

    kind = "gat"

    def __init__(self, adjacency=None, hidden=32, heads=1, dropout=0.0, epochs=200, lr=0.01, clip_norm=5.0,
                 seed=0):
        self.adjacency = adjacency
        self.hidden = hidden
        self.heads = heads
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.clip_norm = clip_norm
        self.seed = seed

    def _config(self, n_features):
        return ModelConfig("gat", n_features, self.hidden, heads=self.heads, dropout=self.dropout, seed=self.seed)


ESTIMATORS = {"stgnn": STGNNClassifier, "gcn": GCNClassifier, "gat": GATClassifier}
