"""Reverse-mode differentiation over a flat operation tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class Var:
    """A tape-tracked array. Values are never mutated after creation."""

    __slots__ = ("value", "tape", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", name: str | None = None):
        self.value = value
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    # operator sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output: Var
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    def __init__(self):
        self.records: list[OpRecord] = []
        self.leaves: list[Var] = []

    def leaf(self, value, name: str | None = None) -> Var:
        var = Var(np.asarray(value, dtype=float), self, name)
        self.leaves.append(var)
        return var

    def record(self, kind: str, inputs: tuple, value: np.ndarray, backward) -> Var:
        out = Var(value, self)
        self.records.append(OpRecord(kind, inputs, out, backward))
        return out

    def __len__(self) -> int:
        return len(self.records)


def grad(tape: Tape, loss: Var, wrt: Iterable[Var] | None = None) -> dict[Var, np.ndarray]:
    """Adjoints of `loss` with respect to `wrt` (default: every leaf).

    Leaves the loss does not depend on get zero gradients.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a Var recorded on this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        g = adjoint.pop(id(rec.output), None)
        if g is None:
            continue
        for x, gx in zip(rec.inputs, rec.backward(g)):
            if gx is None or not isinstance(x, Var):
                continue
            key = id(x)
            adjoint[key] = adjoint[key] + gx if key in adjoint else gx
    targets = tape.leaves if wrt is None else list(wrt)
    return {v: adjoint.get(id(v), np.zeros_like(v.value)) for v in targets}
