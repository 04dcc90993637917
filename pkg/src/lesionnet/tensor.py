"""Rank-4 NCHW arrays.

Tensors are plain ``numpy.ndarray`` objects with ``ndim == 4`` laid out as
(batch, channels, rows, cols). The helpers here validate shapes strictly:
nothing in the engine broadcasts implicitly.
"""
from __future__ import annotations

import contextlib
from typing import Iterator, NamedTuple

import numpy as np

_MAX_ELEMENTS = np.iinfo(np.intp).max // 8

_default_dtype = np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors and parameters (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the default dtype, e.g. ``with precision("float64")``."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def as_shape(shape) -> Shape4:
    if len(shape) != 4:
        raise ShapeError(f"expected 4 extents, got {tuple(shape)}")
    dims = []
    for d in shape:
        if int(d) != d or d < 1:
            raise ShapeError(f"extents must be positive integers, got {tuple(shape)}")
        dims.append(int(d))
    s = Shape4(*dims)
    if s.size > _MAX_ELEMENTS:
        raise OverflowError(f"tensor of shape {tuple(s)} is too large")
    return s


def check_tensor(x: np.ndarray, name: str = "tensor") -> Shape4:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        got = getattr(x, "shape", type(x).__name__)
        raise ShapeError(f"{name} must be a rank-4 NCHW array, got {got}")
    return Shape4(*x.shape)


def tensor_fill(shape, value: float, dtype=None) -> np.ndarray:
    s = as_shape(shape)
    return np.full(s, value, dtype=dtype or _default_dtype)


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sa = check_tensor(a, "a")
    sb = check_tensor(b, "b")
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def slice_channel(x: np.ndarray, c: int) -> np.ndarray:
    s = check_tensor(x, "x")
    if not 0 <= c < s.c:
        raise IndexError(f"channel {c} out of range for {s.c} channels")
    return x[:, c : c + 1].copy()
