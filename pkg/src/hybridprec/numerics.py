"""Binary16 emulation and the precision-aware kernels built on it.

Tensors are plain ``np.float32`` arrays. A tensor tagged ``Dtype.F16E`` holds
only values that are exactly representable in IEEE binary16, so it can be
widened, stored, or compared without ambiguity. Kernels take a
``KernelConfig`` that says which lattice the result lives on and how
reductions are accumulated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import _kernels

F16_MAX = 65504.0
CANONICAL_NAN_BITS32 = 0x7FC00000
CANONICAL_NAN_BITS16 = 0x7E00


class Dtype(str, enum.Enum):
    F32 = "f32"
    F16E = "f16"

    @property
    def width(self) -> int:
        """Storage width in bytes."""
        return 4 if self is Dtype.F32 else 2


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    compute_dtype: Dtype = Dtype.F32
    accum_dtype: Dtype = Dtype.F32
    softmax_stabilized: bool = True

    def __post_init__(self):
        if self.compute_dtype is Dtype.F32 and self.accum_dtype is not Dtype.F32:
            raise ValueError("accum_dtype must be F32 when compute_dtype is F32")


FP32 = KernelConfig()


def round16(x):
    """Round float32 values to the nearest binary16 value (ties to even).

    Inputs are converted to float32 first. Overflow gives a signed infinity,
    subnormals are kept, and every NaN becomes the canonical quiet NaN.
    Scalars come back as ``np.float32``; arrays keep their shape.
    """
    src = np.asarray(x, dtype=np.float32)
    flat = np.ascontiguousarray(src.reshape(-1))
    out = np.empty_like(flat)
    _kernels.round_vec(out, flat, flat.shape[0])
    if src.ndim == 0:
        return out[0]
    return out.reshape(src.shape)


def cast(x, dtype: Dtype) -> np.ndarray:
    """Narrow to the binary16 lattice or pass through as float32."""
    if dtype is Dtype.F16E:
        return round16(x)
    return np.asarray(x, dtype=np.float32)


def _fit(x, dtype: Dtype) -> np.ndarray:
    # Kernel results are produced in float32 and then placed on the output lattice.
    return round16(x) if dtype is Dtype.F16E else np.asarray(x, dtype=np.float32)


def is_f16_exact(x) -> bool:
    """True if every element already sits on the binary16 lattice."""
    a = np.ascontiguousarray(x, dtype=np.float32)
    return bool(np.array_equal(round16(a).view(np.uint32), a.view(np.uint32)))


def to_bits16(x) -> np.ndarray:
    """Encode float32 values to binary16 bit patterns (uint16), rounding first."""
    r = round16(np.atleast_1d(x))
    with np.errstate(over="ignore", invalid="ignore"):
        bits = r.astype(np.float16).view(np.uint16)
    bits = np.where(np.isnan(r), np.uint16(CANONICAL_NAN_BITS16), bits)
    return bits.astype(np.uint16)


def from_bits16(bits) -> np.ndarray:
    """Decode binary16 bit patterns to float32 (NaNs canonicalised)."""
    h = np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float32)
    return np.where(np.isnan(h), np.float32("nan"), h).astype(np.float32)


def matmul(a, b, cfg: KernelConfig = FP32) -> np.ndarray:
    """Matrix product ``a @ b`` under ``cfg``.

    ``a`` may carry leading batch dimensions. ``b`` is either 2-D (shared
    weight) or has the same leading dimensions as ``a``. Operands are
    expected to be on the compute lattice already.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}")

    if cfg.accum_dtype is Dtype.F32:
        return _fit(np.matmul(a, b), cfg.compute_dtype)

    lead = a.shape[:-2]
    m, k = a.shape[-2:]
    n = b.shape[-1]
    if b.ndim == 2:
        # Rows are independent, so collapse every batch into one tall operand.
        a3 = np.ascontiguousarray(a.reshape(1, -1, k))
        b3 = np.ascontiguousarray(b.reshape(1, k, n))
    else:
        a3 = np.ascontiguousarray(a.reshape(-1, m, k))
        b3 = np.ascontiguousarray(b.reshape(-1, k, n))
    out = _kernels.matmul_acc16(a3, b3)
    return out.reshape(*lead, m, n)


def _row_sums(x2d: np.ndarray, accum: Dtype) -> np.ndarray:
    x2d = np.ascontiguousarray(x2d, dtype=np.float32)
    if accum is Dtype.F16E:
        return _kernels.seqsum_acc16(x2d)
    return _kernels.seqsum_acc32(x2d)


def seqsum(x, accum: Dtype, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` in ascending index order with the given accumulator."""
    x = np.moveaxis(np.asarray(x, dtype=np.float32), axis, -1)
    lead = x.shape[:-1]
    return _row_sums(x.reshape(-1, x.shape[-1]), accum).reshape(lead)


def softmax(x, axis: int = -1, cfg: KernelConfig = FP32) -> np.ndarray:
    """Softmax along ``axis``.

    With ``cfg.softmax_stabilized`` the row maximum is subtracted before
    exponentiation. Without it, large inputs overflow on the binary16 lattice
    and the resulting inf/inf surfaces as NaN; that path exists on purpose.
    """
    dt = cfg.compute_dtype
    x = np.moveaxis(np.asarray(x, dtype=np.float32), axis, -1)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if cfg.softmax_stabilized:
            shifted = _fit(x - x.max(axis=-1, keepdims=True), dt)
        else:
            shifted = x
        e = _fit(np.exp(shifted), dt)
        s = _fit(seqsum(e, cfg.accum_dtype), dt)
        out = _fit(e / s[..., None], dt)
    return np.moveaxis(out, -1, axis)


def layernorm(x, gamma, beta, eps: float = 1e-5, cfg: KernelConfig = FP32) -> np.ndarray:
    """Layer normalisation over the last axis with population variance."""
    x = np.asarray(x, dtype=np.float32)
    gamma = np.asarray(gamma, dtype=np.float32)
    beta = np.asarray(beta, dtype=np.float32)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layernorm expects gamma/beta of shape ({n},), got {gamma.shape}/{beta.shape}"
        )
    if not eps > 0:
        raise ValueError("eps must be positive")
    acc = cfg.accum_dtype
    inv_n = np.float32(n)
    mean = _fit(seqsum(x, acc) / inv_n, acc)
    centered = _fit(x - mean[..., None], acc)
    var = _fit(seqsum(_fit(centered * centered, acc), acc) / inv_n, acc)
    denom = np.sqrt(var + np.float32(eps)).astype(np.float32)
    y = centered / denom[..., None] * gamma + beta
    return _fit(y, cfg.compute_dtype)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def gelu(x, cfg: KernelConfig = FP32) -> np.ndarray:
    """GELU with the exact erf formulation."""
    x64 = np.asarray(x, dtype=np.float32).astype(np.float64)
    y = 0.5 * x64 * (1.0 + special.erf(x64 * _INV_SQRT2))
    return _fit(y.astype(np.float32), cfg.compute_dtype)


def add(a, b, cfg: KernelConfig = FP32) -> np.ndarray:
    """Elementwise sum placed on the compute lattice (residuals, biases)."""
    dt = cfg.compute_dtype
    return _fit(cast(a, dt) + cast(b, dt), dt)


def scale(x, factor: float, cfg: KernelConfig = FP32) -> np.ndarray:
    dt = cfg.compute_dtype
    return _fit(cast(x, dt) * np.float32(factor), dt)
