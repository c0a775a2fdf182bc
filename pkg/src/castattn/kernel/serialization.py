"""Binary tensor container.

A file is a sequence of named records::

    u32 name_length | name (UTF-8) | b"CAST1" | u32 rank | rank x u64 extents | float32 data

All integers and floats are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .tensor import Tensor

MAGIC = b"CAST1"


class FormatError(ValueError):
    pass


def write_tensor(fh, arr) -> None:
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4", order="C")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor file")
    return buf


def dump_tensors(tensors: Mapping[str, object], path: Union[str, Path]) -> None:
    """Write ``{name: array}`` records in insertion order."""
    buf = io.BytesIO()
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path: Union[str, Path]) -> dict[str, np.ndarray]:
    fh = io.BytesIO(Path(path).read_bytes())
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            break
        if len(head) != 4:
            raise FormatError("truncated record header")
        (n,) = struct.unpack("<I", head)
        name = _read_exact(fh, n).decode("utf-8")
        out[name] = read_tensor(fh)
    return out
