"""Pure-NumPy fallback for the hot warp kernels.

Mirrors the compiled extension operation-for-operation so both backends
produce bit-identical results: per column x, partial polynomials
A_j(x) = sum_k c[k,j] x^k are built by Horner over k, then each pixel
evaluates by Horner over y. The extension is compiled with FP contraction
off for the same reason.
"""
from __future__ import annotations

import numpy as np


def _column_tables(coef: np.ndarray, width: int) -> np.ndarray:
    """Table A[j, x] = sum_k coef[k, j] * x**k for x = 0..width-1."""
    p = coef.shape[0] - 1
    xs = np.arange(width, dtype=np.float64)
    tables = np.empty((p + 1, width), dtype=np.float64)
    for j in range(p + 1):
        k = p - j
        acc = np.full(width, coef[k, j], dtype=np.float64)
        while k > 0:
            k -= 1
            acc = acc * xs + coef[k, j]
        tables[j] = acc
    return tables


def _expand_rows(tables: np.ndarray, height: int) -> np.ndarray:
    """Evaluate sum_j A[j, x] * y**j by Horner over y for the full grid."""
    p = tables.shape[0] - 1
    ys = np.arange(height, dtype=np.float64).reshape(height, 1)
    acc = np.broadcast_to(tables[p], (height, tables.shape[1]))
    for j in range(p - 1, -1, -1):
        acc = acc * ys + tables[j]
    return np.array(acc) if p == 0 else acc


def _source_coords(cx: np.ndarray, cy: np.ndarray, width: int, height: int):
    sx = _expand_rows(_column_tables(cx, width), height)
    sy = _expand_rows(_column_tables(cy, width), height)
    return sx, sy


def warp_score(src: np.ndarray, ref: np.ndarray, cx: np.ndarray, cy: np.ndarray):
    """Backward-warp ``src`` and count overlap with ``ref`` in one pass.

    Returns (overlap, warped_count): the number of warped segmented pixels
    coinciding with ``ref`` pixels, and the total warped segmented count.
    Out-of-bounds and non-finite source coordinates sample background.
    """
    height, width = src.shape
    sx, sy = _source_coords(cx, cy, width, height)
    xi = np.rint(sx)
    yi = np.rint(sy)
    valid = (xi >= 0.0) & (xi <= width - 1.0) & (yi >= 0.0) & (yi <= height - 1.0)
    lin = yi[valid].astype(np.int64) * width + xi[valid].astype(np.int64)
    hits = src.reshape(-1)[lin]
    overlap = int((hits & ref[valid]).sum())
    return overlap, int(hits.sum())


def backward_indices(height: int, width: int, cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
    """Per-pixel source linear index under the backward warp, -1 if out of bounds."""
    sx, sy = _source_coords(cx, cy, width, height)
    xi = np.rint(sx)
    yi = np.rint(sy)
    valid = (xi >= 0.0) & (xi <= width - 1.0) & (yi >= 0.0) & (yi <= height - 1.0)
    out = np.full((height, width), -1, dtype=np.int64)
    out[valid] = yi[valid].astype(np.int64) * width + xi[valid].astype(np.int64)
    return out
