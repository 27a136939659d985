"""LSTM -> GCN -> GCN node classifier and static GCN / GAT baselines.

Parameters are plain dicts of named float64 arrays. Forward functions
accept either arrays (pure evaluation) or tape `Var`s (differentiable).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from functools import cached_property
from typing import Mapping

import numpy as np

from .graph import SparseAdjacency, normalize_adjacency
from .numcore import glorot_init, ops

MODEL_KINDS = ("stgnn", "gcn", "gat")
GAT_SLOPE = 0.2
LSTM_GATES = ("i", "f", "g", "o")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "stgnn"
    in_features: int = 26
    hidden: int = 32
    gcn_hidden: int = 16
    n_classes: int = 2
    attention_pooling: bool = False
    heads: int = 1
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if min(self.in_features, self.hidden, self.gcn_hidden, self.n_classes, self.heads) < 1:
            raise ModelError("layer widths and heads must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: Mapping[str, str | int | float | bool]) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ModelError(f"unknown model config key(s): {sorted(unknown)}")
        parsed = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                parsed[key] = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes", "on")
            else:
                parsed[key] = type(default)(raw)
        return cls(**parsed)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        return cls.from_mapping(values)


@dataclass
class GraphInputs:
    """Node features (T x N x F) and the raw aggregate adjacency of the spatial graph."""

    features: np.ndarray
    adjacency: SparseAdjacency

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ModelError("features must be T x N x F")
        if self.adjacency.normalized:
            raise ModelError("GraphInputs takes the raw adjacency")
        if self.adjacency.n != self.features.shape[1]:
            raise ModelError("adjacency size does not match node count")

    @property
    def n_nodes(self) -> int:
        return self.features.shape[1]

    @cached_property
    def normalized(self) -> SparseAdjacency:
        return normalize_adjacency(self.adjacency)

    @cached_property
    def attention_graph(self) -> SparseAdjacency:
        return self.adjacency.with_self_loops()

    @cached_property
    def static_features(self) -> np.ndarray:
        """Time-mean of the feature tensor, the input of the static baselines."""
        return self.features.mean(axis=0)


# -- parameters --------------------------------------------------------------


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    F, H = config.in_features, config.hidden
    p: dict[str, np.ndarray] = {}
    if config.kind == "stgnn":
        for gate in LSTM_GATES:
            p[f"lstm.W_{gate}"] = glorot_init(F, H, rng)
        for gate in LSTM_GATES:
            p[f"lstm.U_{gate}"] = glorot_init(H, H, rng)
        for gate in LSTM_GATES:
            p[f"lstm.b_{gate}"] = np.zeros(H)
        if config.attention_pooling:
            p["lstm.attn"] = glorot_init(H, 1, rng)
        p["gcn1.W"] = glorot_init(H, config.gcn_hidden, rng)
        p["gcn1.b"] = np.zeros(config.gcn_hidden)
        p["gcn2.W"] = glorot_init(config.gcn_hidden, config.n_classes, rng)
        p["gcn2.b"] = np.zeros(config.n_classes)
    elif config.kind == "gcn":
        p["gcn1.W"] = glorot_init(F, H, rng)
        p["gcn1.b"] = np.zeros(H)
        p["gcn2.W"] = glorot_init(H, config.n_classes, rng)
        p["gcn2.b"] = np.zeros(config.n_classes)
    else:
        for k in range(config.heads):
            p[f"gat1.W{k}"] = glorot_init(F, H, rng)
            p[f"gat1.a{k}"] = glorot_init(2 * H, 1, rng).ravel()
        p["gat2.W0"] = glorot_init(H * config.heads, config.n_classes, rng)
        p["gat2.a0"] = glorot_init(2 * config.n_classes, 1, rng).ravel()
    return p


# -- layers ------------------------------------------------------------------


def _stacked(params: Mapping, prefix: str, kind: str):
    return ops.concat([params[f"{prefix}{kind}_{g}"] for g in LSTM_GATES], axis=-1)


def lstm_cell(x, h, c, params: Mapping, prefix: str = "lstm.", stacked=None):
    """One LSTM step for all nodes at once; returns (h', c').

    Gate order i, f, g, o. `stacked` optionally carries the column-stacked
    (W, U, b) so a sequence builds them once.
    """
    W, U, b = stacked if stacked is not None else (
        _stacked(params, prefix, "W"), _stacked(params, prefix, "U"), _stacked(params, prefix, "b"))
    H = ops._val(U).shape[0]
    z = ops.add(ops.add(ops.matmul(x, W), ops.matmul(h, U)), b)
    ifo = ops.sigmoid(ops.concat([ops.slice_cols(z, 0, 2 * H), ops.slice_cols(z, 3 * H, 4 * H)], axis=1))
    g = ops.tanh(ops.slice_cols(z, 2 * H, 3 * H))
    i, f, o = ops.slice_cols(ifo, 0, H), ops.slice_cols(ifo, H, 2 * H), ops.slice_cols(ifo, 2 * H, 3 * H)
    c_next = ops.add(ops.mul(f, c), ops.mul(i, g))
    h_next = ops.mul(o, ops.tanh(c_next))
    return h_next, c_next


def lstm_encode(features: np.ndarray, params: Mapping, attention_pooling: bool = False,
                prefix: str = "lstm.", dropout_mask=None):
    """Run the LSTM over windows 0..T-1 from zero state.

    Returns the last hidden state, or with `attention_pooling` a softmax
    over windows of a learned score of each hidden state.
    """
    T, N, _ = features.shape
    if T < 1:
        raise ModelError("need at least one window")
    x = features if dropout_mask is None else features * dropout_mask
    states = ops.lstm_sequence(x, _stacked(params, prefix, "W"), _stacked(params, prefix, "U"),
                               _stacked(params, prefix, "b"))
    if not attention_pooling:
        return ops.gather(states, T - 1)
    H = ops._val(states).shape[2]
    scores = ops.reshape(ops.matmul(ops.reshape(states, (T * N, H)), params[f"{prefix}attn"]), (T, N))
    alpha = ops.row_softmax(ops.transpose(scores))  # N x T
    weights = ops.reshape(ops.transpose(alpha), (T, N, 1))
    return ops.sum(ops.mul(weights, states), axis=0)


def gcn_layer(adj: SparseAdjacency, h, weight, bias, activation=None):
    """act(A_hat . H . W + b) with A_hat the normalized adjacency."""
    if not getattr(adj, "normalized", False):
        raise ModelError("gcn_layer needs a normalized adjacency")
    out = ops.add(ops.spmm(adj, ops.matmul(h, weight)), bias)
    return activation(out) if activation is not None else out


def gat_layer(adj: SparseAdjacency, h, weight, attn, activation=None, slope: float = GAT_SLOPE,
              return_attention: bool = False):
    """Single-head attention aggregation over each node's neighbors and itself.

    Neighborhoods are the stored entries of `adj` plus self-loops; edge
    weights are ignored. Row u attends over columns v.
    """
    graph = adj if _has_full_diagonal(adj) else adj.with_self_loops()
    indptr, indices = graph.indptr, graph.indices
    n = graph.n
    rows = np.repeat(np.arange(n), np.diff(indptr))
    wh = ops.matmul(h, weight)
    f_out = ops._val(wh).shape[1]
    a_src = ops.reshape(ops.gather(attn, np.arange(f_out)), (f_out, 1))
    a_dst = ops.reshape(ops.gather(attn, np.arange(f_out, 2 * f_out)), (f_out, 1))
    s = ops.reshape(ops.matmul(wh, a_src), (n,))
    t = ops.reshape(ops.matmul(wh, a_dst), (n,))
    e = ops.leaky_relu(ops.add(ops.gather(s, rows), ops.gather(t, indices)), slope)
    alpha = ops.segment_softmax(e, indptr)
    out = ops.edge_aggregate(alpha, indptr, indices, wh)
    if activation is not None:
        out = activation(out)
    return (out, alpha) if return_attention else out


def _has_full_diagonal(adj: SparseAdjacency) -> bool:
    return bool(np.all(adj.matrix.diagonal() != 0))


# -- full models -------------------------------------------------------------


def _dropout(x, rate: float, rng: np.random.Generator | None):
    if rate <= 0 or rng is None:
        return x
    mask = (rng.random(ops._val(x).shape) >= rate) / (1.0 - rate)
    return ops.mul(x, mask)


def stgnn_forward(features: np.ndarray, adj: SparseAdjacency, params: Mapping,
                  attention_pooling: bool = False, dropout: float = 0.0, rng=None):
    """Logits (N x classes): two graph convolutions over the LSTM node embeddings."""
    f_in = ops._val(params["lstm.W_i"]).shape[0]
    if features.shape[2] != f_in:
        raise ModelError(f"features have width {features.shape[2]}, parameters expect {f_in}")
    mask = None
    if dropout > 0 and rng is not None:
        mask = (rng.random(features.shape) >= dropout) / (1.0 - dropout)
    emb = lstm_encode(features, params, attention_pooling, dropout_mask=mask)
    emb = _dropout(emb, dropout, rng)
    h1 = gcn_layer(adj, emb, params["gcn1.W"], params["gcn1.b"], ops.relu)
    h1 = _dropout(h1, dropout, rng)
    return gcn_layer(adj, h1, params["gcn2.W"], params["gcn2.b"])


def baseline_forward(kind: str, features_static: np.ndarray, graph: SparseAdjacency, params: Mapping,
                     heads: int = 1, dropout: float = 0.0, rng=None):
    """Two stacked GCN or GAT layers on static node features.

    For ``gcn`` a raw `graph` is normalized here; ``gat`` uses the raw
    structure with self-loops.
    """
    x = _dropout(features_static, dropout, rng)
    if kind == "gcn":
        adj = graph if graph.normalized else normalize_adjacency(graph)
        h1 = gcn_layer(adj, x, params["gcn1.W"], params["gcn1.b"], ops.relu)
        return gcn_layer(adj, _dropout(h1, dropout, rng), params["gcn2.W"], params["gcn2.b"])
    if kind == "gat":
        if graph.normalized:
            raise ModelError("gat expects the raw adjacency")
        heads_out = [gat_layer(graph, x, params[f"gat1.W{k}"], params[f"gat1.a{k}"], ops.elu)
                     for k in range(heads)]
        h1 = heads_out[0] if heads == 1 else ops.concat(heads_out, axis=1)
        return gat_layer(graph, _dropout(h1, dropout, rng), params["gat2.W0"], params["gat2.a0"])
    raise ModelError(f"unknown baseline kind {kind!r}")


def forward(config: ModelConfig, params: Mapping, inputs: GraphInputs, training: bool = False, rng=None):
    """Logits for every node under `config`."""
    dropout = config.dropout if training else 0.0
    if config.kind == "stgnn":
        return stgnn_forward(inputs.features, inputs.normalized, params, config.attention_pooling,
                             dropout, rng)
    graph = inputs.normalized if config.kind == "gcn" else inputs.attention_graph
    static = inputs.static_features
    if static.shape[1] != config.in_features:
        raise ModelError(f"features have width {static.shape[1]}, config expects {config.in_features}")
    return baseline_forward(config.kind, static, graph, params, config.heads, dropout, rng)


def predict_proba(config: ModelConfig, params: Mapping, inputs: GraphInputs) -> np.ndarray:
    logits = np.asarray(forward(config, params, inputs))
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)
