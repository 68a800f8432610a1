"""Dense tensor engine with reverse-mode autodiff, layers, and Adam."""
from . import functional
from .functional import ShapeError, forward_suite
from .gradcheck import GradCheckReport, grad_check, relative_error
from .layers import Conv2d, Embedding, GroupNorm, Linear, Module, ParameterSet
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tape,
    Tensor,
    backward,
    clear_tape,
    default_dtype,
    get_tape,
    no_grad,
    precision,
    set_debug,
    set_default_dtype,
)

__all__ = [
    "Adam", "AdamState", "Conv2d", "Embedding", "GradCheckReport", "GroupNorm", "Linear",
    "Module", "ParameterSet", "ShapeError", "Tape", "Tensor", "adam_step", "backward",
    "clear_tape", "default_dtype", "forward_suite", "functional", "get_tape", "grad_check",
    "no_grad", "precision", "relative_error", "set_debug", "set_default_dtype",
]
