"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between `analytic` and (f(p + h e) - f(p - h e)) / 2h.

    With `max_coords`, at most that many coordinates per parameter are
    sampled (without replacement).
    """
    rng = np.random.default_rng(seed)
    work = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
    worst = 0.0
    for name, value in work.items():
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = np.asarray(analytic[name], dtype=float).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = f(work)
            flat[i] = orig - h
            down = f(work)
            flat[i] = orig
            worst = max(worst, relative_error(a_flat[i], (up - down) / (2 * h)))
    return worst
