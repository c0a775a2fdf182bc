"""Dense tensor value type, reverse-mode tape and live-element accounting.

Tensors wrap a contiguous, read-only NumPy buffer of 32- or 64-bit floats.
Every construction registers its element count with the process-global
:data:`METER`; the count is released when the tensor is garbage collected, so
the meter's peak reflects how many elements were simultaneously reachable.
"""

from __future__ import annotations

import threading
import weakref
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class KernelError(Exception):
    """Base class for tensor-kernel failures."""


class ShapeError(KernelError, ValueError):
    pass


class NonFiniteError(KernelError, FloatingPointError):
    pass


class AllocationMeter:
    """Counts live tensor elements and the high-water mark since last reset."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def allocate(self, n: int) -> None:
        with self._lock:
            self.current += n
            if self.current > self.peak:
                self.peak = self.current

    def release(self, n: int) -> None:
        with self._lock:
            self.current -= n

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.current

    def peak_live_elements(self) -> int:
        return self.peak

    def live_elements(self) -> int:
        return self.current


METER = AllocationMeter()


def peak_live_elements() -> int:
    return METER.peak_live_elements()


def reset_peak() -> None:
    METER.reset_peak()


def _as_float_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    dt = np.dtype(dtype)
    if dt not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """Immutable dense array participating in tape-based differentiation.

    Parameters
    ----------
    data : array_like
        Values; copied into a fresh contiguous buffer.
    dtype : float32 or float64, optional
        Defaults to the dtype of ``data`` when it is already a float array of
        a supported width, otherwise float32.
    requires_grad : bool
        Mark a leaf whose gradient :func:`backward` should report.
    name : str, optional
        Label used in error messages and gradient reports.
    """

    __slots__ = ("data", "requires_grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: Optional[str] = None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            dtype = data.dtype
        arr = np.array(data, dtype=_as_float_dtype(dtype), copy=True, order="C")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self._init(arr, requires_grad, True, name)

    def _init(self, arr: np.ndarray, requires_grad: bool, is_leaf: bool, name: Optional[str]) -> None:
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf
        self.name = name
        METER.allocate(arr.size)
        weakref.finalize(self, METER.release, arr.size)

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str = "", check: bool = True) -> "Tensor":
        # Takes ownership of ``arr`` (no copy); used for op outputs.
        if check and not np.isfinite(arr).all():
            raise NonFiniteError(f"{op or 'operation'} produced non-finite values")
        t = cls.__new__(cls)
        t._init(np.ascontiguousarray(arr), False, True, None)
        return t

    # -- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Operator sugar; implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class _Entry:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable primitive applications.

    Use as a context manager; primitives applied while the tape is active
    whose inputs require gradient are appended together with the activations
    their adjoints need. One tape per forward pass; tapes are not shared
    between threads.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        out.requires_grad = True
        out.is_leaf = False
        self.entries.append(_Entry(op, out, tuple(inputs), backward))


def needs_grad(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, output_grad=None, output: Optional[Tensor] = None) -> dict:
    """Propagate ``output_grad`` backwards through ``tape``.

    ``output`` defaults to the last tensor recorded on the tape. Returns a
    mapping from every leaf tensor marked ``requires_grad`` that the output
    depends on to its gradient tensor. The tape's saved activations are
    released as entries are consumed, so a tape can be replayed only once.
    """
    if tape.consumed:
        raise KernelError("tape has already been replayed")
    if not tape.entries:
        raise KernelError("cannot run backward over an empty tape")
    if output is None:
        output = tape.entries[-1].out
    if output_grad is None:
        if output.size != 1:
            raise ShapeError("output_grad is required for non-scalar outputs")
        output_grad = np.ones(output.shape, dtype=output.dtype)
    g0 = output_grad.data if isinstance(output_grad, Tensor) else np.asarray(output_grad, dtype=output.dtype)
    if g0.shape != output.shape:
        raise ShapeError(f"output_grad shape {g0.shape} does not match output shape {output.shape}")

    grads: dict[int, Tensor] = {id(output): Tensor._wrap(np.array(g0, dtype=output.dtype), "backward")}
    leaves: dict[int, Tensor] = {}
    entries = tape.entries
    tape.consumed = True
    while entries:
        entry = entries.pop()
        g = grads.pop(id(entry.out), None)
        if g is None:
            continue
        in_grads = entry.backward(g.data)
        del g
        for x, gx in zip(entry.inputs, in_grads):
            if gx is None or not isinstance(x, Tensor) or not x.requires_grad:
                continue
            key = id(x)
            prev = grads.get(key)
            if prev is None:
                grads[key] = Tensor._wrap(np.array(gx, dtype=x.dtype, copy=True), f"{entry.op} adjoint")
            else:
                grads[key] = Tensor._wrap(prev.data + gx, f"{entry.op} adjoint")
            if x.is_leaf:
                leaves[key] = x
        del entry, in_grads
    if output.is_leaf and output.requires_grad:
        leaves[id(output)] = output
    return {leaves[k]: grads[k] for k in leaves if k in grads}
