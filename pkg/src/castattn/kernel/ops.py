"""Differentiable primitives over :class:`~castattn.kernel.tensor.Tensor`.

Every primitive computes its output with NumPy, validates finiteness, and, when
a tape is active and an input requires gradient, records a closure computing
the input adjoints from the output adjoint.
"""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Sequence

import numpy as np
from scipy import sparse, special

from .tensor import (
    ShapeError,
    Tensor,
    _reduce_to_shape,
    active_tape,
    needs_grad,
)

_CORRUPTED: set[str] = set()

DIFFERENTIABLE_OPS = frozenset({
    "add", "bce_with_logits", "div", "gather_rows", "identity", "laplace", "matmul", "mul", "neg", "one_minus",
    "pad_rows", "permute", "reshape", "scale", "scatter_add_rows", "sigmoid", "slice_rows", "softmax",
    "softplus_plus_one", "sub", "sum",
})


@contextlib.contextmanager
def corrupted_adjoint(op: str, factor: float = 1.5):
    """Debug hook: scale the adjoint of primitive ``op`` by ``factor``.

    Exists so gradient checkers can be shown to reject a wrong derivative.
    """
    if op not in DIFFERENTIABLE_OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(DIFFERENTIABLE_OPS)}")
    _CORRUPTED.add(op)
    global _CORRUPT_FACTOR
    old, _CORRUPT_FACTOR = _CORRUPT_FACTOR, factor
    try:
        yield
    finally:
        _CORRUPTED.discard(op)
        _CORRUPT_FACTOR = old


_CORRUPT_FACTOR = 1.5


def _maybe_corrupt(op: str, g):
    if g is not None and op in _CORRUPTED:
        return g * _CORRUPT_FACTOR
    return g


def _record(op: str, out: Tensor, inputs: Sequence, backward) -> Tensor:
    tape = active_tape()
    if tape is not None and needs_grad(*inputs):
        if _CORRUPTED:
            inner = backward

            def backward(g, _inner=inner):
                return tuple(_maybe_corrupt(op, x) for x in _inner(g))

        tape.record(op, out, inputs, backward)
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32), dtype=dtype)


def _binary_operands(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    return a, b


# -- elementwise ---------------------------------------------------------------


def identity(x: Tensor) -> Tensor:
    out = Tensor._wrap(x.data.copy(), "identity", check=False)
    return _record("identity", out, (x,), lambda g: (g,))


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = Tensor._wrap(a.data + b.data, "add")
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b), lambda g: (_reduce_to_shape(g, sa), _reduce_to_shape(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = Tensor._wrap(a.data - b.data, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", out, (a, b), lambda g: (_reduce_to_shape(g, sa), -_reduce_to_shape(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = Tensor._wrap(a.data * b.data, "mul")

    def backward(g):
        ga = _reduce_to_shape(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to_shape(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")
    out = Tensor._wrap(a.data / b.data, "div")

    def backward(g):
        ga = _reduce_to_shape(g / b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to_shape(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    out = Tensor._wrap(-x.data, "neg", check=False)
    return _record("neg", out, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar (no tensor allocated for the constant)."""
    c = x.dtype.type(c)
    out = Tensor._wrap(x.data * c, "scale")
    return _record("scale", out, (x,), lambda g: (g * c,))


def one_minus(x: Tensor) -> Tensor:
    out = Tensor._wrap(1 - x.data, "one_minus", check=False)
    return _record("one_minus", out, (x,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data)
    out = Tensor._wrap(y, "sigmoid")
    return _record("sigmoid", out, (x,), lambda g: (g * y * (1 - y),))


def softplus_plus_one(x: Tensor) -> Tensor:
    """``log(1 + exp(x)) + 1``; always >= 1."""
    xd = x.data
    y = np.logaddexp(0, xd) + 1
    out = Tensor._wrap(y.astype(x.dtype, copy=False), "softplus_plus_one")
    return _record("softplus_plus_one", out, (x,), lambda g: (g * special.expit(xd),))


_LAPLACE_MU = math.sqrt(0.5)
_LAPLACE_SIGMA = math.sqrt(1.0 / (4.0 * math.pi))


def laplace(x: Tensor) -> Tensor:
    """Elementwise Laplace attention function ``0.5 * (1 + erf((x - mu) / (sigma * sqrt 2)))``."""
    xd = x.data
    z = (xd - _LAPLACE_MU) / (_LAPLACE_SIGMA * math.sqrt(2.0))
    y = (0.5 * (1.0 + special.erf(z))).astype(x.dtype, copy=False)
    out = Tensor._wrap(y, "laplace")

    def backward(g):
        pdf = np.exp(-z * z) / (_LAPLACE_SIGMA * math.sqrt(2.0 * math.pi))
        return (g * pdf.astype(x.dtype, copy=False),)

    return _record("laplace", out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if x.ndim == 0:
        raise ShapeError("softmax of a 0-d tensor")
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis}")
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    del e
    out = Tensor._wrap(y, "softmax")

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), backward)


def bce_with_logits(z: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of logits ``z`` against 0/1 ``target``."""
    t = np.asarray(target, dtype=z.dtype).reshape(z.shape)
    zd = z.data
    loss = np.logaddexp(0, zd) - t * zd
    out = Tensor._wrap(np.asarray(loss.mean(), dtype=z.dtype), "bce_with_logits")
    n = zd.size
    return _record("bce_with_logits", out, (z,), lambda g: (g * (special.expit(zd) - t) / n,))


# -- reductions and layout ----------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor._wrap(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum")
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from None
    out = Tensor._wrap(y, "reshape", check=False)
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._wrap(np.ascontiguousarray(x.data.transpose(axes)), "permute", check=False)
    return _record("permute", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last(x: Tensor) -> Tensor:
    """Transpose the two trailing axes."""
    if x.ndim < 2:
        raise ShapeError("swap_last needs at least 2 dimensions")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def pad_rows(x: Tensor, n_total: int) -> Tensor:
    """Append zero rows along axis -2 up to ``n_total`` rows."""
    n = x.shape[-2]
    if n_total < n:
        raise ShapeError(f"cannot pad {n} rows down to {n_total}")
    y = np.zeros(x.shape[:-2] + (n_total, x.shape[-1]), dtype=x.dtype)
    y[..., :n, :] = x.data
    out = Tensor._wrap(y, "pad_rows", check=False)
    return _record("pad_rows", out, (x,), lambda g: (np.ascontiguousarray(g[..., :n, :]),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[-2]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {n} rows")
    out = Tensor._wrap(np.ascontiguousarray(x.data[..., start:stop, :]), "slice_rows", check=False)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., start:stop, :] = g
        return (gx,)

    return _record("slice_rows", out, (x,), backward)


# -- products --------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch extents broadcast."""
    a, b = _binary_operands_mm(a, b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from None
    out = Tensor._wrap(np.matmul(a.data, b.data), "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _reduce_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), backward)


def _binary_operands_mm(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


# -- index selection (not differentiable) -----------------------------------------


def argsort_desc(x, axis: int = -1) -> np.ndarray:
    """Indices sorting ``x`` descending along ``axis``; equal values keep index order."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argsort(-xd, axis=axis, kind="stable")


def topk_indices(x, k: int, axis: int = -1) -> np.ndarray:
    """Indices of the ``k`` largest entries along ``axis`` in descending order.

    Ties are broken towards the lowest index.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    n = xd.shape[axis]
    if k > n:
        raise ValueError(f"k={k} exceeds axis length {n}")
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return np.take(np.zeros(xd.shape, dtype=np.int64), np.arange(0), axis=axis)
    if k == n:
        return argsort_desc(xd, axis=axis)
    # Partial selection: everything above the k-th largest value, plus the
    # lowest-index entries equal to it, then a stable sort of the k winners.
    neg = np.ascontiguousarray(-np.moveaxis(xd, axis, -1))
    kth = np.partition(neg, k - 1, axis=-1)[..., k - 1:k]
    chosen = neg <= kth
    if (chosen.sum(axis=-1) != k).any():
        tie = neg == kth
        need = k - (neg < kth).sum(axis=-1, keepdims=True)
        chosen = (neg < kth) | (tie & (np.cumsum(tie, axis=-1) <= need))
    idx = np.nonzero(chosen.reshape(-1, n))[1].reshape(neg.shape[:-1] + (k,))
    order = np.argsort(np.take_along_axis(neg, idx, axis=-1), axis=-1, kind="stable")
    return np.moveaxis(np.take_along_axis(idx, order, axis=-1), -1, axis)


# -- gather / scatter -------------------------------------------------------------


def _flat_batch(idx: np.ndarray, batch_shape: tuple, n: int) -> np.ndarray:
    """Offsets turning per-batch row indices into indices of a flattened array."""
    nb = int(np.prod(batch_shape)) if batch_shape else 1
    base = (np.arange(nb) * n).reshape(batch_shape + (1,) * (idx.ndim - len(batch_shape)))
    return idx + base


class RowIndex:
    """Validated row indices for :func:`gather_rows` / :func:`scatter_add_rows`.

    ``idx`` has shape ``(*B, *I)`` with entries in ``[0, n)``. The plan for
    summing duplicate rows is built on first use and reused, so one index
    object can serve many gathers and scatters.
    """

    def __init__(self, idx, n: int, batch_dims: int = 0):
        idx = np.asarray(idx)
        if not np.issubdtype(idx.dtype, np.integer):
            raise TypeError(f"row indices must be integers, got {idx.dtype}")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"row index out of range for length {n}")
        if batch_dims > idx.ndim:
            raise ShapeError(f"index of rank {idx.ndim} cannot have {batch_dims} batch axes")
        self.idx = idx
        self.n = n
        self.batch_dims = batch_dims
        self.batch_shape = tuple(idx.shape[:batch_dims])
        self.flat = _flat_batch(idx, self.batch_shape, n)
        self.total = (int(np.prod(self.batch_shape)) if self.batch_shape else 1) * n
        self._incidence = None
        self._unique = None

    @property
    def shape(self) -> tuple:
        return self.idx.shape

    def _plan(self):
        if self._unique is None:
            keys = self.flat.reshape(-1)
            self._unique = keys.size == 0 or np.bincount(keys, minlength=self.total).max() <= 1
            if not self._unique:
                # 0/1 incidence matrix: one sparse product sums all duplicates.
                self._incidence = sparse.csr_matrix(
                    (np.ones(keys.size, dtype=np.float64), (keys, np.arange(keys.size))),
                    shape=(self.total, keys.size))
        return self._unique

    def sum_rows(self, src: np.ndarray) -> np.ndarray:
        """``out[flat[i]] += src[i]``; returns ``(total, *F)``."""
        keys = self.flat.reshape(-1)
        feat = src.shape[self.flat.ndim:]
        rows = src.reshape((keys.size,) + feat)
        if self._plan():
            out = np.zeros((self.total,) + feat, dtype=src.dtype)
            out[keys] = rows
            return out
        incidence = self._incidence.astype(src.dtype, copy=False)
        out = incidence @ rows.reshape(keys.size, -1)
        return np.asarray(out, dtype=src.dtype).reshape((self.total,) + feat)


def _row_index(idx, n: int, batch_dims: int) -> RowIndex:
    if isinstance(idx, RowIndex):
        if idx.n != n or idx.batch_dims != batch_dims:
            raise ShapeError(f"row index built for length {idx.n} with {idx.batch_dims} batch axes, "
                             f"used with length {n} and {batch_dims}")
        return idx
    return RowIndex(idx, n, batch_dims)


def gather_rows(x: Tensor, idx, batch_dims: int = 0) -> Tensor:
    """Select rows of ``x`` along axis ``batch_dims``.

    ``x`` has shape ``(*B, n, *F)`` and ``idx`` shape ``(*B, *I)`` with the
    same leading ``B``; the result has shape ``(*B, *I, *F)``. ``idx`` may be
    a prebuilt :class:`RowIndex`.
    """
    if batch_dims >= x.ndim:
        raise ShapeError("gather_rows needs a row axis after the batch axes")
    bshape = x.shape[:batch_dims]
    ri = _row_index(idx, x.shape[batch_dims], batch_dims)
    if ri.batch_shape != bshape:
        raise ShapeError(f"index batch shape {ri.batch_shape} does not match tensor batch shape {bshape}")
    feat = x.shape[batch_dims + 1:]
    y = x.data.reshape((-1,) + feat)[ri.flat]
    out = Tensor._wrap(y, "gather_rows", check=False)
    shape = x.shape
    return _record("gather_rows", out, (x,), lambda g: (ri.sum_rows(g).reshape(shape),))


def scatter_add_rows(target_len: int, idx, src: Tensor, batch_dims: int = 0) -> Tensor:
    """Inverse of :func:`gather_rows`: sum rows of ``src`` into ``target_len`` slots.

    Rows landing on the same target are summed; untouched targets are zero.
    """
    ri = _row_index(idx, target_len, batch_dims)
    if tuple(src.shape[:len(ri.shape)]) != tuple(ri.shape):
        raise ShapeError(f"source shape {src.shape} does not start with index shape {ri.shape}")
    feat = src.shape[len(ri.shape):]
    y = ri.sum_rows(src.data)
    out = Tensor._wrap(y.reshape(ri.batch_shape + (target_len,) + feat), "scatter_add_rows")
    return _record("scatter_add_rows", out, (src,), lambda g: (g.reshape((-1,) + feat)[ri.flat],))
