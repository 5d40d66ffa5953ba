"""Compiled inner loops for binary16 emulation.

Everything here operates on float32 buffers whose values are kept on the
binary16 lattice. Rounding is done on the raw float32 bit pattern, so it is
exact and platform independent; numba only removes interpreter overhead from
the sequential accumulation loops.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_SIGN = np.uint32(0x80000000)
_ABS = np.uint32(0x7FFFFFFF)
_INF = np.uint32(0x7F800000)
_QNAN = np.uint32(0x7FC00000)
# |x| >= 65520 (halfway between 65504 and 2**16) rounds to infinity.
_OVERFLOW = np.uint32(0x477FF000)
# |x| < 2**-14 lands in the binary16 subnormal range.
_MIN_NORMAL = np.uint32(0x38800000)
_HALF_ULP_M1 = np.uint32(0x0FFF)
_KEEP = np.uint32(0xFFFFE000)
_SHIFT = np.uint32(13)
_ONE = np.uint32(1)

_TWO24 = np.float32(2.0**24)
_TWOM24 = np.float32(2.0**-24)
_MAGIC = np.float32(2.0**23)


@njit(cache=True, nogil=True)
def round_vec(dst, src, n):
    """dst[:n] = round16(src[:n]); dst and src must not alias."""
    sbits = src.view(np.uint32)
    dbits = dst.view(np.uint32)
    any_small = False
    for j in range(n):
        b = sbits[j]
        mag = b & _ABS
        # Round-to-nearest-even on the 13 discarded mantissa bits; a carry
        # out of the mantissa bumps the exponent, which is what we want.
        out = (mag + _HALF_ULP_M1 + ((mag >> _SHIFT) & _ONE)) & _KEEP
        if mag >= _OVERFLOW:
            out = _INF
        out = out | (b & _SIGN)
        if mag > _INF:
            out = _QNAN
        dbits[j] = out
        any_small |= mag < _MIN_NORMAL
    if any_small:
        for j in range(n):
            b = sbits[j]
            if (b & _ABS) < _MIN_NORMAL:
                # Subnormal quantum is 2**-24. Scaling by 2**24 is exact and
                # adding/subtracting 2**23 rounds to an integer, ties-to-even.
                q = (abs(src[j]) * _TWO24 + _MAGIC) - _MAGIC
                sub = np.float32(q * _TWOM24)
                dst[j] = -sub if b & _SIGN else sub


@njit(cache=True, nogil=True)
def matmul_acc16(a, b):
    """Batched matmul with binary16 products and binary16 running sums.

    a: [P, M, K], b: [P, K, N], float32 on the binary16 lattice. Each output
    element accumulates over k in ascending order; the product and every
    partial sum are rounded to binary16.
    """
    P, M, K = a.shape
    N = b.shape[2]
    out = np.zeros((P, M, N), dtype=np.float32)
    prod = np.empty(N, dtype=np.float32)
    rprod = np.empty(N, dtype=np.float32)
    summ = np.empty(N, dtype=np.float32)
    for p in range(P):
        for i in range(M):
            acc = out[p, i]
            for k in range(K):
                aik = a[p, i, k]
                bk = b[p, k]
                for j in range(N):
                    prod[j] = aik * bk[j]
                round_vec(rprod, prod, N)
                for j in range(N):
                    summ[j] = acc[j] + rprod[j]
                round_vec(acc, summ, N)
    return out


@njit(cache=True, nogil=True)
def seqsum_acc16(x):
    """Row sums of [R, N], ascending index, rounding to binary16 after each add."""
    R, N = x.shape
    out = np.zeros(R, dtype=np.float32)
    tmp = np.empty(R, dtype=np.float32)
    for j in range(N):
        for r in range(R):
            tmp[r] = out[r] + x[r, j]
        round_vec(out, tmp, R)
    return out


@njit(cache=True, nogil=True)
def seqsum_acc32(x):
    """Row sums of [R, N] in float32, ascending index."""
    R, N = x.shape
    out = np.zeros(R, dtype=np.float32)
    for r in range(R):
        acc = np.float32(0.0)
        for j in range(N):
            acc = np.float32(acc + x[r, j])
        out[r] = acc
    return out
