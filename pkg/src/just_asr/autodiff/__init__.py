from . import ops
from .gradcheck import GradCheckReport, grad_check
from .tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    default_dtype,
    high_precision,
    precision,
)

__all__ = [
    "GradCheckReport",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "default_dtype",
    "grad_check",
    "high_precision",
    "ops",
    "precision",
]
