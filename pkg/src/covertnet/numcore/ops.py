"""Differentiable primitives.

Every op accepts `Var` or plain arrays. Plain arrays are constants; an op
whose inputs are all constants returns a plain array and records nothing.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logsumexp

from .tape import Var


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _emit(kind: str, inputs: tuple, value: np.ndarray, backward):
    for x in inputs:
        if isinstance(x, Var):
            return x.tape.record(kind, inputs, value, backward)
    return value


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _csr(adj) -> sp.csr_matrix:
    return adj.matrix if hasattr(adj, "matrix") else sp.csr_matrix(adj)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def back(g):
        # skip the product for constant operands
        return (g @ bv.T if isinstance(a, Var) else None, av.T @ g if isinstance(b, Var) else None)

    return _emit("matmul", (a, b), av @ bv, back)


def spmm(adj, b):
    """Constant sparse matrix times a dense operand."""
    m = _csr(adj)
    bv = _val(b)
    if m.shape[1] != bv.shape[0]:
        raise ValueError(f"spmm shape mismatch {m.shape} @ {bv.shape}")
    return _emit("spmm", (None, b), np.asarray(m @ bv), lambda g: (None, np.asarray(m.T @ g)))


def add(a, b):
    av, bv = _val(a), _val(b)
    return _emit("add", (a, b), av + bv,
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _emit("sub", (a, b), av - bv,
                 lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def sum(x, axis: int | None = None):
    xv = _val(x)
    if axis is None:
        return _emit("sum", (x,), np.array(xv.sum()), lambda g: (np.full_like(xv, g),))
    return _emit("sum", (x,), xv.sum(axis=axis),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),))


def mean(x):
    xv = _val(x)
    n = xv.size
    return _emit("mean", (x,), np.array(xv.mean()), lambda g: (np.full_like(xv, g / n),))


# -- elementwise -------------------------------------------------------------


def sigmoid(x):
    y = expit(_val(x))
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(_val(x))
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x):
    xv = _val(x)
    on = xv > 0
    return _emit("relu", (x,), np.where(on, xv, 0.0), lambda g: (g * on,))


def leaky_relu(x, slope: float = 0.2):
    xv = _val(x)
    scale = np.where(xv > 0, 1.0, slope)
    return _emit("leaky_relu", (x,), xv * scale, lambda g: (g * scale,))


def elu(x, alpha: float = 1.0):
    xv = _val(x)
    neg = alpha * np.expm1(np.minimum(xv, 0.0))
    y = np.where(xv > 0, xv, neg)
    dy = np.where(xv > 0, 1.0, neg + alpha)
    return _emit("elu", (x,), y, lambda g: (g * dy,))


# -- structure ---------------------------------------------------------------


def concat(xs: Sequence, axis: int = -1):
    vals = [_val(x) for x in xs]
    axis = axis % vals[0].ndim
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", tuple(xs), np.concatenate(vals, axis=axis),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take_cols(x, cols):
    """Columns `cols` of a 2-D operand (keeps the 2-D shape)."""
    xv = _val(x)
    cols = np.atleast_1d(np.asarray(cols, dtype=np.int64))

    def back(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, (slice(None), cols), g)
        return (gx,)

    return _emit("take_cols", (x,), xv[:, cols], back)


def slice_cols(x, start: int, stop: int):
    """Contiguous column block x[:, start:stop]."""
    xv = _val(x)

    def back(g):
        gx = np.zeros_like(xv)
        gx[:, start:stop] = g
        return (gx,)

    return _emit("slice_cols", (x,), xv[:, start:stop], back)


def transpose(x):
    xv = _val(x)
    return _emit("transpose", (x,), xv.T.copy(), lambda g: (g.T,))


def reshape(x, shape):
    xv = _val(x)
    return _emit("reshape", (x,), xv.reshape(shape), lambda g: (g.reshape(xv.shape),))


def gather(x, index):
    """Rows `index` of x; repeated indices accumulate gradient."""
    xv = _val(x)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        if xv.ndim == 1:
            return (np.bincount(index, weights=g, minlength=xv.shape[0]),)
        gx = np.zeros_like(xv)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("gather", (x,), xv[index], back)


# -- recurrent ---------------------------------------------------------------


def lstm_sequence(x, W, U, b):
    """Hidden states (T x N x H) of an LSTM run from zero state over x (T x N x F).

    W (F x 4H), U (H x 4H) and b (4H,) hold the gates column-stacked in the
    order input, forget, cell, output. The backward pass is hand-written
    backpropagation through time.
    """
    xv, Wv, Uv, bv = _val(x), _val(W), _val(U), _val(b)
    T, N, F = xv.shape
    H = Uv.shape[0]
    if Wv.shape != (F, 4 * H) or Uv.shape != (H, 4 * H) or bv.shape != (4 * H,):
        raise ValueError(f"lstm shapes x{xv.shape} W{Wv.shape} U{Uv.shape} b{bv.shape}")
    xw = (xv.reshape(T * N, F) @ Wv).reshape(T, N, 4 * H) + bv
    acts = np.empty((T, N, 4 * H))
    cs = np.empty((T, N, H))
    hs = np.empty((T, N, H))
    h = np.zeros((N, H))
    c = np.zeros((N, H))
    # sigmoid(z) = (tanh(z/2) + 1)/2, so all four gates take one tanh pass
    half = np.full(4 * H, 0.5)
    half[2 * H:3 * H] = 1.0
    shift = np.where(half == 0.5, 0.5, 0.0)
    for t in range(T):
        z = xw[t] + h @ Uv
        a = acts[t]
        np.tanh(z * half, out=a)
        a *= half
        a += shift
        c = a[:, H:2 * H] * c + a[:, :H] * a[:, 2 * H:3 * H]
        h = a[:, 3 * H:] * np.tanh(c)
        cs[t], hs[t] = c, h

    def back(g):
        dz_all = np.empty((T, N, 4 * H))
        dh_next = np.zeros((N, H))
        dc_next = np.zeros((N, H))
        for t in reversed(range(T)):
            a = acts[t]
            i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = np.tanh(cs[t])
            c_prev = cs[t - 1] if t > 0 else 0.0
            dh = g[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ Uv.T
        flat_dz = dz_all.reshape(T * N, 4 * H)
        h_prev = np.concatenate([np.zeros((1, N, H)), hs[:-1]]).reshape(T * N, H)
        dx = (flat_dz @ Wv.T).reshape(T, N, F) if isinstance(x, Var) else None
        return (dx, xv.reshape(T * N, F).T @ flat_dz, h_prev.T @ flat_dz, flat_dz.sum(axis=0))

    return _emit("lstm_sequence", (x, W, U, b), hs, back)


# -- normalization and losses ------------------------------------------------


def row_softmax(x):
    xv = _val(x)
    z = np.exp(xv - xv.max(axis=1, keepdims=True))
    y = z / z.sum(axis=1, keepdims=True)
    return _emit("row_softmax", (x,), y,
                 lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def segment_softmax(x, indptr):
    """Softmax of a 1-D operand within contiguous groups given by CSR row pointers."""
    xv = _val(x)
    indptr = np.asarray(indptr, dtype=np.int64)
    n = len(indptr) - 1
    sizes = np.diff(indptr)
    group = np.repeat(np.arange(n), sizes)
    starts = indptr[:-1][sizes > 0]
    if len(xv) == 0:
        return _emit("segment_softmax", (x,), xv.copy(), lambda g: (g,))
    gmax = np.maximum.reduceat(xv, starts)
    shift = np.empty(n)
    shift[sizes > 0] = gmax
    z = np.exp(xv - shift[group])
    y = z / np.bincount(group, weights=z, minlength=n)[group]

    def back(g):
        dot = np.bincount(group, weights=g * y, minlength=n)
        return (y * (g - dot[group]),)

    return _emit("segment_softmax", (x,), y, back)


def edge_aggregate(alpha, indptr, indices, h):
    """out[u] = sum over stored entries (u, v) of alpha_uv * h[v]; alpha is in CSR order."""
    av, hv = _val(alpha), _val(h)
    n = len(indptr) - 1
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    m = sp.csr_matrix((av, indices, indptr), shape=(n, hv.shape[0]))
    rows = np.repeat(np.arange(n), np.diff(indptr))

    def back(g):
        g_alpha = np.einsum("ij,ij->i", g[rows], hv[indices])
        return (g_alpha, None, None, np.asarray(m.T @ g))

    return _emit("edge_aggregate", (alpha, None, None, h), np.asarray(m @ hv), back)


def weighted_cross_entropy(logits, targets, weights):
    """Sum_i w_i * CE_i / Sum_i w_i over entries with w_i > 0 and a target >= 0."""
    zv = _val(logits)
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=float).copy()
    w[targets < 0] = 0.0
    total = w.sum()
    if total <= 0:
        raise ValueError("cross-entropy over an empty mask")
    safe_t = np.where(targets < 0, 0, targets)
    lse = logsumexp(zv, axis=1)
    picked = zv[np.arange(len(zv)), safe_t]
    loss = np.array(float(np.dot(w, lse - picked) / total))

    def back(g):
        p = np.exp(zv - lse[:, None])
        p[np.arange(len(zv)), safe_t] -= 1.0
        return (g * p * (w / total)[:, None],)

    return _emit("weighted_cross_entropy", (logits,), loss, back)
