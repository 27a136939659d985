"""Parameter initialization, Adam and gradient clipping on named parameter dicts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]


def glorot_init(rows: int, cols: int, seed: int | np.random.Generator) -> np.ndarray:
    """Uniform on [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))] from a PCG64 stream."""
    if rows < 1 or cols < 1:
        raise ValueError("glorot_init needs rows, cols >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        new_m[name] = np.asarray(m, dtype=float)
        new_v[name] = np.asarray(v, dtype=float)
        new_params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_global_norm(grads: Params, max_norm: float | None) -> tuple[Params, float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
