"""Coordinate channels appended to the input image.

The row channel holds each pixel's row index and the column channel its
column index. With ``scale=True`` both are divided by ``extent - 1`` so they
span [0, 1]; a unit extent maps to 0.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .tensor import ShapeError, check_tensor, concat_channels, get_default_dtype


class CoordChannels(NamedTuple):
    row_channel: np.ndarray  # (1, 1, h, w)
    col_channel: np.ndarray  # (1, 1, h, w)


def make_coord_channels(h: int, w: int, scale: bool = False, dtype=None) -> CoordChannels:
    if h < 1 or w < 1:
        raise ValueError(f"extents must be positive, got {(h, w)}")
    dtype = dtype or get_default_dtype()
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    if scale:
        rows = rows / (h - 1) if h > 1 else rows * 0
        cols = cols / (w - 1) if w > 1 else cols * 0
    row = np.broadcast_to(rows[:, None], (h, w)).astype(dtype)
    col = np.broadcast_to(cols[None, :], (h, w)).astype(dtype)
    return CoordChannels(row[None, None], col[None, None])


def coordconv_apply(x: np.ndarray, enabled: bool = True, scale: bool = True) -> np.ndarray:
    """Append (row, col) channels to an (n, 3, h, w) image batch -> (n, 5, h, w).

    With ``enabled=False`` the input is returned unchanged.
    """
    n, c, h, w = check_tensor(x, "image")
    if c != 3:
        raise ShapeError(f"coordinate layer expects 3 image channels, got {c}")
    if not enabled:
        return x
    coords = make_coord_channels(h, w, scale=scale, dtype=x.dtype)
    extra = np.concatenate([coords.row_channel, coords.col_channel], axis=1)
    return concat_channels(x, np.broadcast_to(extra, (n, 2, h, w)))
