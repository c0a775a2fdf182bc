from . import ops
from .ops import (
    RowIndex,
    argsort_desc,
    corrupted_adjoint,
    gather_rows,
    matmul,
    scatter_add_rows,
    sigmoid,
    softmax,
    softplus_plus_one,
    topk_indices,
)
from .serialization import dump_tensors, load_tensors
from .tensor import (
    METER,
    KernelError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    peak_live_elements,
    reset_peak,
)

__all__ = [
    "METER",
    "RowIndex",
    "KernelError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "argsort_desc",
    "backward",
    "corrupted_adjoint",
    "dump_tensors",
    "gather_rows",
    "load_tensors",
    "matmul",
    "ops",
    "peak_live_elements",
    "reset_peak",
    "scatter_add_rows",
    "sigmoid",
    "softmax",
    "softplus_plus_one",
    "topk_indices",
]
