"""Dense NCHW tensors, a few checked primitive ops, seeded streams and the
binary tensor file format.

Tensors are plain ``numpy.ndarray`` objects in ``float32`` (single) or
``float64`` (double). The helpers here add the shape/precision checks the
rest of the package relies on; hot loops inside layers use numpy directly.
"""
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ShapeError

PRECISIONS = {"single": np.float32, "double": np.float64}
DEFAULT_PRECISION = "single"

MAGIC = b"RTFL"
FORMAT_VERSION = 1
_PRECISION_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {tag: dtype for dtype, tag in _PRECISION_TAGS.items()}
_HEADER = struct.Struct("<4sHB4I")


def dtype_of(precision):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}") from None


def as_tensor(x, precision=None):
    """Return ``x`` as a 4-D float array.

    Without ``precision`` float inputs keep their dtype and anything else
    becomes single precision.
    """
    arr = np.asarray(x)
    if precision is not None:
        arr = arr.astype(dtype_of(precision), copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype_of(DEFAULT_PRECISION))
    if arr.ndim != 4:
        raise ShapeError("expected a 4-D (N, C, H, W) tensor", arr.shape)
    return arr


def _broadcast_operand(a, b):
    if np.isscalar(b) or np.ndim(b) == 0:
        return np.asarray(b, dtype=a.dtype)
    b = np.asarray(b, dtype=a.dtype)
    if b.shape == a.shape:
        return b
    if b.ndim == 1 and a.ndim == 4 and b.shape[0] == a.shape[1]:
        return b.reshape(1, -1, 1, 1)
    raise ShapeError("operands are not broadcast-compatible", a.shape, b.shape)


def elementwise(op, a, b=None):
    """Apply a pointwise op. ``b`` may be a same-shape array, a scalar, or a
    per-channel vector of length C.

    ``relu_grad(a, b)`` gates the upstream gradient ``b`` by ``a > 0``.
    """
    a = np.asarray(a)
    if op == "relu":
        return np.maximum(a, 0).astype(a.dtype, copy=False)
    if b is None:
        raise ValueError(f"op {op!r} needs a second operand")
    b = _broadcast_operand(a, b)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op in ("mul", "scale"):
        return a * b
    if op == "relu_grad":
        return (b * (a > 0)).astype(a.dtype, copy=False)
    raise ValueError(f"unknown elementwise op {op!r}")


_AXIS_NAMES = {"N": 0, "C": 1, "H": 2, "W": 3}


def reduce(op, a, axes=(0, 1, 2, 3)):
    """Reduce over ``axes`` (ints or the letters N, C, H, W), keeping them as
    size-1 dimensions."""
    a = np.asarray(a)
    if a.size == 0:
        raise ShapeError("cannot reduce an empty tensor", a.shape)
    axes = tuple(sorted({_AXIS_NAMES.get(ax, ax) for ax in axes}))
    if any(not isinstance(ax, (int, np.integer)) or not 0 <= ax < a.ndim for ax in axes):
        raise ValueError(f"invalid axes {axes} for a rank-{a.ndim} tensor")
    if op == "sum":
        return a.sum(axis=axes, keepdims=True)
    if op == "mean":
        return a.mean(axis=axes, keepdims=True)
    if op == "max":
        return a.max(axis=axes, keepdims=True)
    raise ValueError(f"unknown reduction {op!r}")


class RngStream:
    """Seeded random stream with labelled, independent sub-streams.

    Backed by numpy's PCG64 seeded through ``SeedSequence``. A sub-stream's
    spawn key is the parent's key extended with the CRC-32 of its label, so
    ``RngStream(7).child("init").child("conv1")`` is the same stream on every
    machine and does not depend on how many other children were created.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed) % 2**64
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, label):
        return RngStream(self.seed, self.path + (zlib.crc32(str(label).encode("utf-8")),))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def rng_uniform(stream, n):
    """``n`` draws from [0, 1) in double precision."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return stream.uniform(n)


def save_tensor(path, arr):
    """Write ``arr`` (rank <= 4; lower ranks are left-padded with 1s) in the
    RTFL format: magic, u16 version, u8 precision tag, 4 x u32 shape, then
    little-endian element data."""
    arr = np.asarray(arr)
    if arr.dtype not in _PRECISION_TAGS:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 4:
        raise ShapeError("tensor files hold at most 4 dimensions", arr.shape)
    shape = (1,) * (4 - arr.ndim) + arr.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _PRECISION_TAGS[arr.dtype], *shape)
    data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(header + data)


def load_tensor(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated tensor header")
    magic, version, tag, *shape = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if tag not in _TAG_DTYPES:
        raise ValueError(f"{path}: unknown precision tag {tag}")
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape))
    expected = _HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), offset=_HEADER.size, count=count)
    return data.astype(dtype).reshape(shape)
