"""Float64 tensors with reverse-mode gradients, Adam, and a finite-difference checker."""

from . import ops
from .checkpoint import load_params, save_params
from .gradcheck import finite_diff_check, relative_error
from .optim import AdamState, adam_step, clip_global_norm, global_norm, glorot_init
from .tape import Tape, Var, grad

__all__ = [
    "AdamState",
    "Tape",
    "Var",
    "adam_step",
    "clip_global_norm",
    "finite_diff_check",
    "global_norm",
    "glorot_init",
    "grad",
    "load_params",
    "ops",
    "relative_error",
    "save_params",
]
