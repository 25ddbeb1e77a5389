"""Dense tensors, boolean masks and the byte-exact stash ledger."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .errors import ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable row-major real array.

    Element width is 4 bytes (``float32``) or 8 bytes (``float64``). ``tag`` is a
    short label used by :class:`StashLedger` when the tensor is retained.
    """

    __slots__ = ("data", "tag")

    def __init__(self, data, dtype=None, tag: Optional[str] = None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = _freeze(arr)
        self.tag = tag

    @classmethod
    def wrap(cls, arr: np.ndarray, tag: Optional[str] = None) -> "Tensor":
        """Adopt ``arr`` without copying. The caller gives up write access."""
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        t.data = _freeze(arr)
        t.tag = tag
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def itemsize(self) -> int:
        return int(self.data.dtype.itemsize)

    @property
    def nbytes(self) -> int:
        return self.size * self.itemsize

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", tag={self.tag!r}" if self.tag else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"


class BoolMask:
    """Boolean tensor stored one byte per element."""

    __slots__ = ("bits", "tag")

    def __init__(self, bits, tag: Optional[str] = None):
        arr = np.asarray(bits)
        if arr.dtype != np.bool_:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("mask entries must be 0 or 1")
            arr = arr.astype(np.bool_)
        else:
            arr = arr.copy()
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"mask dimensions must be positive, got {arr.shape}")
        self.bits = _freeze(np.ascontiguousarray(arr))
        self.tag = tag

    @property
    def shape(self) -> tuple:
        return self.bits.shape

    @property
    def size(self) -> int:
        return int(self.bits.size)

    itemsize = 1

    @property
    def nbytes(self) -> int:
        return self.size

    def __repr__(self):
        tag = f", tag={self.tag!r}" if self.tag else ""
        return f"BoolMask(shape={self.shape}{tag})"


Stashable = Union[Tensor, BoolMask]


class Role(str, enum.Enum):
    OP_OWN = "op-own-stash"
    SHARED = "shared-downstream"
    STATISTIC = "statistic"


@dataclass(frozen=True)
class LedgerEntry:
    tag: str
    role: Role
    element_count: int
    bytes: int


@dataclass
class StashLedger:
    """Registry of activations retained for the backward pass.

    An object recorded more than once (e.g. an input shared by the Q, K and V
    projections) is charged on its first recording only.
    """

    entries: list = field(default_factory=list)
    live_bytes: int = 0
    peak_bytes: int = 0
    transient_bytes: int = 0
    peak_transient_bytes: int = 0
    _seen: dict = field(default_factory=dict, repr=False)

    def record(self, tag: Optional[str], role: Role, obj: Stashable) -> int:
        role = Role(role)
        label = tag if tag is not None else (obj.tag or "untagged")
        key = id(obj)
        if key in self._seen:
            self.entries.append(LedgerEntry(label, role, obj.size, 0))
            return 0
        nbytes = obj.size * obj.itemsize
        # Holding a reference keeps id(obj) unique for the ledger's lifetime.
        self._seen[key] = [obj, nbytes, True]
        self.entries.append(LedgerEntry(label, role, obj.size, nbytes))
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return nbytes

    def release(self, obj: Stashable) -> int:
        slot = self._seen.get(id(obj))
        if slot is None or not slot[2]:
            return 0
        slot[2] = False
        self.live_bytes -= slot[1]
        return slot[1]

    def is_recorded(self, obj: Stashable) -> bool:
        return id(obj) in self._seen

    def sample(self) -> int:
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return self.live_bytes

    def add_transient(self, nbytes: int) -> None:
        self.transient_bytes += nbytes
        self.peak_transient_bytes = max(self.peak_transient_bytes, self.transient_bytes)

    def drop_transient(self, nbytes: int) -> None:
        self.transient_bytes -= nbytes

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.entries)

    def bytes_by_tag(self) -> dict:
        out: dict = {}
        for e in self.entries:
            out[e.tag] = out.get(e.tag, 0) + e.bytes
        return out

    def bytes_by_role(self) -> dict:
        out = {r: 0 for r in Role}
        for e in self.entries:
            out[e.role] += e.bytes
        return out


def ledger_record(ledger: StashLedger, tag: Optional[str], role: Role, obj: Stashable) -> int:
    """Record ``obj`` in ``ledger`` and return the number of bytes added."""
    return ledger.record(tag, role, obj)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions broadcast."""
    A, B = _as_array(a), _as_array(b)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {A.shape} x {B.shape}")
    try:
        out = np.matmul(A, B)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {A.shape} x {B.shape}") from exc
    return Tensor.wrap(out)


def row_moments(x: Tensor) -> tuple:
    """Per-row mean and population variance over the last axis."""
    X = _as_array(x)
    if X.ndim < 1 or X.shape[-1] < 1:
        raise ShapeError(f"row_moments needs at least one column, got {X.shape}")
    mean = X.mean(axis=-1)
    centered = X - mean[..., None]
    var = (centered * centered).mean(axis=-1)
    return Tensor.wrap(mean), Tensor.wrap(var)


def sum_to_shape(grad: np.ndarray, shape: Iterable[int]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    shape = tuple(shape)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad
