"""Reverse-mode differentiation, AdamW, and checkpoints."""

from . import ops
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .gradcheck import GradcheckResult, gradcheck
from .optim import Param, ParamStore, adamw_step, lr_schedule
from .tensor import Tape, Tensor, as_tensor, make_result

__all__ = [
    "GradcheckResult",
    "Param",
    "ParamStore",
    "Tape",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "gradcheck",
    "load_checkpoint",
    "lr_schedule",
    "make_result",
    "ops",
    "read_checkpoint",
    "save_checkpoint",
]
