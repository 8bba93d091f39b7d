# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled hot kernels: polynomial backward warping fused with overlap counting.

Must stay numerically identical to ``_kernels_py``: same column-table
Horner over k, same per-pixel Horner over y, same round-half-even and
bounds tests. Built with -ffp-contract=off so no FMA contraction sneaks in.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport rint

cnp.import_array()


cdef void _fill_column_tables(const double[:, ::1] coef, double[:, ::1] out,
                              Py_ssize_t width) noexcept nogil:
    cdef Py_ssize_t p = coef.shape[0] - 1
    cdef Py_ssize_t j, x, k
    cdef double acc, xv
    for j in range(p + 1):
        for x in range(width):
            xv = <double> x
            k = p - j
            acc = coef[k, j]
            while k > 0:
                k -= 1
                acc = acc * xv + coef[k, j]
            out[j, x] = acc


def warp_score(const cnp.uint8_t[:, ::1] src, const cnp.uint8_t[:, ::1] ref,
               const double[:, ::1] cx, const double[:, ::1] cy):
    """Fused backward warp + Dice counting; returns (overlap, warped_count)."""
    cdef Py_ssize_t height = src.shape[0]
    cdef Py_ssize_t width = src.shape[1]
    cdef Py_ssize_t p = cx.shape[0] - 1
    ax_arr = np.empty((p + 1, width), dtype=np.float64)
    ay_arr = np.empty((p + 1, width), dtype=np.float64)
    cdef double[:, ::1] ax = ax_arr
    cdef double[:, ::1] ay = ay_arr
    cdef Py_ssize_t x, y, j
    cdef double yv, sx, sy, xi, yi
    cdef cnp.uint8_t bit
    cdef long long overlap = 0, count = 0
    with nogil:
        _fill_column_tables(cx, ax, width)
        _fill_column_tables(cy, ay, width)
        for y in range(height):
            yv = <double> y
            for x in range(width):
                sx = ax[p, x]
                sy = ay[p, x]
                for j in range(p - 1, -1, -1):
                    sx = sx * yv + ax[j, x]
                    sy = sy * yv + ay[j, x]
                xi = rint(sx)
                yi = rint(sy)
                if xi >= 0.0 and xi <= <double> (width - 1) and yi >= 0.0 and yi <= <double> (height - 1):
                    bit = src[<Py_ssize_t> yi, <Py_ssize_t> xi]
                    count += bit
                    overlap += bit & ref[y, x]
    return overlap, count


def backward_indices(Py_ssize_t height, Py_ssize_t width,
                     const double[:, ::1] cx, const double[:, ::1] cy):
    """Per-pixel source linear index under the backward warp, -1 if out of bounds."""
    cdef Py_ssize_t p = cx.shape[0] - 1
    ax_arr = np.empty((p + 1, width), dtype=np.float64)
    ay_arr = np.empty((p + 1, width), dtype=np.float64)
    out_arr = np.empty((height, width), dtype=np.int64)
    cdef double[:, ::1] ax = ax_arr
    cdef double[:, ::1] ay = ay_arr
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t x, y, j
    cdef double yv, sx, sy, xi, yi
    with nogil:
        _fill_column_tables(cx, ax, width)
        _fill_column_tables(cy, ay, width)
        for y in range(height):
            yv = <double> y
            for x in range(width):
                sx = ax[p, x]
                sy = ay[p, x]
                for j in range(p - 1, -1, -1):
                    sx = sx * yv + ax[j, x]
                    sy = sy * yv + ay[j, x]
                xi = rint(sx)
                yi = rint(sy)
                if xi >= 0.0 and xi <= <double> (width - 1) and yi >= 0.0 and yi <= <double> (height - 1):
                    out[y, x] = (<cnp.int64_t> yi) * width + <cnp.int64_t> xi
                else:
                    out[y, x] = -1
    return out_arr
