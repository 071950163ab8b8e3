"""Dense NCHW tensors and the ``.pten`` binary container.

Tensors are plain :class:`numpy.ndarray` objects restricted to 1-4 dims and
one of three dtypes. This module validates those restrictions and provides
the shape-strict elementwise ops and the bit-exact file format used to pass
tensors between CLI invocations.

File layout (all little-endian)::

    magic    4 bytes   b"PTEN"
    version  u8        1
    dtype    u8        0=float32, 1=float64, 2=uint8
    ndim     u8        1..4
    dims     ndim x u32
    payload  row-major values
"""

from __future__ import annotations

import os
import struct
from typing import Literal

import numpy as np

MAGIC = b"PTEN"
VERSION = 1

DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

ElementwiseOp = Literal["add", "sub", "mul", "div"]


class TensorError(ValueError):
    """Invalid tensor shape, dtype or contents."""


class NonFiniteError(TensorError):
    """A library operation produced NaN or Inf."""


class TensorFormatError(TensorError):
    """A ``.pten`` file could not be decoded."""


def check_tensor(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate ``t`` against the tensor invariants and return it unchanged."""
    if not isinstance(t, np.ndarray):
        raise TensorError(f"{name}: expected numpy.ndarray, got {type(t).__name__}")
    if not 1 <= t.ndim <= 4:
        raise TensorError(f"{name}: expected 1-4 dims, got {t.ndim}")
    if any(d < 1 for d in t.shape):
        raise TensorError(f"{name}: every extent must be >= 1, got {t.shape}")
    if t.dtype not in DTYPE_CODES:
        raise TensorError(f"{name}: unsupported dtype {t.dtype}")
    return t


def check_finite(t: np.ndarray, what: str = "result") -> np.ndarray:
    if t.dtype.kind == "f" and not np.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def elementwise(a: np.ndarray, b: np.ndarray, op: ElementwiseOp) -> np.ndarray:
    """Apply ``op`` pointwise. No broadcasting: dims and dtype must match.

    uint8 arithmetic wraps modulo 256; ``div`` is only defined for floats.
    """
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TensorError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if op == "div":
        if a.dtype.kind != "f":
            raise TensorError("div is only defined for float dtypes")
        if np.any(b == 0):
            raise ZeroDivisionError("division by zero in elementwise div")
    fn = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}.get(op)
    if fn is None:
        raise ValueError(f"unknown op {op!r}")
    # overflow surfaces as NonFiniteError below
    with np.errstate(over="ignore", invalid="ignore"):
        out = fn(a, b)
    return check_finite(out, f"elementwise {op}")


def encode_tensor(t: np.ndarray) -> bytes:
    check_tensor(t)
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise TensorFormatError("truncated header")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"bad ndim {ndim}")
    off = 7 + 4 * ndim
    if len(buf) < off:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"zero extent in dims {dims}")
    dtype = CODE_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    got = len(buf) - off
    if got < expected:
        raise TensorFormatError(f"truncated payload: {got} of {expected} bytes")
    if got > expected:
        raise TensorFormatError(f"payload length {got} does not match dims {dims}")
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), offset=off)
    return arr.astype(dtype).reshape(dims)


def save_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
