"""Compiled integer GEMM kernels for the symmetric vs. asymmetric comparison.

Both kernels widen their operands to int32 and run the same core loop, so
the only difference in work is the offset-correction passes of the
asymmetric (zero-point) variant.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _gemm_core(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0
        for p in range(k):
            av = a[i, p]
            for j in range(n):
                out[i, j] += av * b[p, j]


@njit(cache=True)
def gemm_s8(a, b, out):
    _gemm_core(a.astype(np.int32), b.astype(np.int32), out)


@njit(cache=True)
def gemm_u8_offset(a, b, a_zero, b_zero, out):
    aw = a.astype(np.int32)
    bw = b.astype(np.int32)
    _gemm_core(aw, bw, out)
    m, k = aw.shape
    n = bw.shape[1]
    rowsum = np.zeros(m, np.int32)
    colsum = np.zeros(n, np.int32)
    for i in range(m):
        s = 0
        for p in range(k):
            s += aw[i, p]
        rowsum[i] = s
    for p in range(k):
        for j in range(n):
            colsum[j] += bw[p, j]
    const = k * a_zero * b_zero
    for i in range(m):
        for j in range(n):
            out[i, j] += const - b_zero * rowsum[i] - a_zero * colsum[j]


@njit(cache=True)
def gemm_s8_requant_shift(a, b, shift, out):
    """GEMM with on-the-fly shift requantization; no int32 staging buffer."""
    aw = a.astype(np.int32)
    bw = b.astype(np.int32)
    m, k = aw.shape
    n = bw.shape[1]
    half = (1 << (shift - 1)) if shift > 0 else 0
    for i in range(m):
        for j in range(n):
            acc = 0
            for p in range(k):
                acc += aw[i, p] * bw[p, j]
            v = (acc + half) >> shift
            if v > 127:
                v = 127
            elif v < -128:
                v = -128
            out[i, j] = v
