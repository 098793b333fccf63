from . import init, ops
from .adam import Adam
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, relative_error
from .tensor import (
    AutodiffError,
    MemoryTracker,
    NumericFault,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    corrupt_adjoint,
    grad_enabled,
    make_node,
    no_grad,
    tape,
)

__all__ = [
    "Adam",
    "AutodiffError",
    "CheckpointError",
    "GradCheckReport",
    "MemoryTracker",
    "NumericFault",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "corrupt_adjoint",
    "grad_check",
    "init",
    "grad_enabled",
    "load_checkpoint",
    "make_node",
    "no_grad",
    "ops",
    "relative_error",
    "save_checkpoint",
    "tape",
]
