"""Analytic roofline model for transformer op classes.

Traffic model: every operand is read once from DRAM and every output written
once, at the element width of the dtype in use. No cache reuse, no fusion.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any, Mapping

from .model import ModelConfig
from .numerics import Dtype
from .policy import OpClass


class Bound(str, enum.Enum):
    COMPUTE = "compute_bound"
    MEMORY = "memory_bound"


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_flops: Mapping[Dtype, float]
    bandwidth: float  # bytes/s

    def __post_init__(self):
        if not self.bandwidth > 0 or any(not v > 0 for v in self.peak_flops.values()):
            raise ValueError(f"hardware spec {self.name!r}: all rates must be positive")

    def ridge(self, dtype: Dtype) -> float:
        return self.peak_flops[dtype] / self.bandwidth

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> HardwareSpec:
        peaks = {Dtype(k): float(v) for k, v in d["peak_flops"].items()}
        return cls(str(d.get("name", "custom")), peaks, float(d["bandwidth"]))

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "peak_flops": {k.value: v for k, v in self.peak_flops.items()},
                "bandwidth": self.bandwidth}


HARDWARE_PRESETS = {
    # FP16 tensor peak and DRAM bandwidth as quoted for the card; the FP32
    # figure is the vendor's non-tensor peak and can be overridden in config.
    "rtx3090": HardwareSpec("rtx3090", {Dtype.F16E: 142.3e12, Dtype.F32: 35.6e12}, 936.2e9),
}

# Published per-class intensity bands, printed next to ours for comparison.
REFERENCE_BANDS = {
    OpClass.LINEAR: ">=45",
    OpClass.SOFTMAX: "2-4",
    OpClass.LAYERNORM: "2-4",
    OpClass.EMBEDDING: "1.5",
}


def hardware_spec(spec: str | Mapping[str, Any] | HardwareSpec) -> HardwareSpec:
    if isinstance(spec, HardwareSpec):
        return spec
    if isinstance(spec, str):
        try:
            return HARDWARE_PRESETS[spec]
        except KeyError:
            raise ValueError(f"unknown hardware preset {spec!r}; valid: {sorted(HARDWARE_PRESETS)}") from None
    return HardwareSpec.from_dict(spec)


@dataclass(frozen=True)
class OpCost:
    op_class: OpClass
    flops: int
    bytes: int

    def __post_init__(self):
        if self.bytes <= 0:
            raise ValueError("byte traffic must be positive")

    @property
    def intensity(self) -> float:
        return self.flops / self.bytes


def matmul_cost(m: int, k: int, n: int, width: int, op_class: OpClass = OpClass.LINEAR, count: int = 1) -> OpCost:
    """(m x k) @ (k x n): 2mkn flops, width * (mk + kn + mn) bytes."""
    return OpCost(op_class, *_mm(m, k, n, width, count))


def _mm(m: int, k: int, n: int, width: int, count: int) -> tuple[int, int]:
    return count * 2 * m * k * n, count * width * (m * k + k * n + m * n)


# Per-element flop charges for the elementwise classes.
SOFTMAX_FLOPS_PER_ELEMENT = 5    # max, subtract, exp, sum, divide
LAYERNORM_FLOPS_PER_ELEMENT = 8  # mean add, sub, square, var add, div, scale, shift, (rsqrt amortised)
GELU_FLOPS_PER_ELEMENT = 8       # mul, erf (counted as 4), add, two muls
RESIDUAL_FLOPS_PER_ELEMENT = 1


def op_cost(op_class: OpClass | str, config: ModelConfig, batch: int, seq: int, width: int) -> OpCost:
    """Aggregate cost of one op class over a full forward pass.

    ``width`` is the element width in bytes (4 for f32, 2 for f16).
    """
    op = OpClass.parse(op_class)
    h, f, L, V = config.hidden, config.ffn, config.num_layers, config.vocab
    H, dh = config.heads, config.head_dim
    T = batch * seq

    if op is OpClass.LINEAR:
        parts = [
            _mm(seq, h, 3 * h, width, batch * L),  # fused q/k/v projections
            _mm(seq, h, h, width, batch * L),
            _mm(seq, h, f, width, batch * L),
            _mm(seq, f, h, width, batch * L),
            _mm(seq, h, V, width, batch),  # tied output projection
        ]
        return OpCost(op, sum(p[0] for p in parts), sum(p[1] for p in parts))
    if op is OpClass.ATTENTION_SCORE_MATMUL:
        n = batch * H * L
        qk = _mm(seq, dh, seq, width, n)
        pv = _mm(seq, seq, dh, width, n)
        return OpCost(op, qk[0] + pv[0], qk[1] + pv[1])
    if op is OpClass.SOFTMAX:
        elements = batch * H * L * seq * seq
        return OpCost(op, SOFTMAX_FLOPS_PER_ELEMENT * elements, width * 2 * elements)
    if op is OpClass.LAYERNORM:
        norms = 2 * L + 1
        elements = norms * T * h
        return OpCost(op, LAYERNORM_FLOPS_PER_ELEMENT * elements, width * (2 * elements + norms * 2 * h))
    if op is OpClass.ACTIVATION:
        elements = L * T * f
        return OpCost(op, GELU_FLOPS_PER_ELEMENT * elements, width * 2 * elements)
    if op is OpClass.EMBEDDING:
        # One add per element, counted as 2*seq*hidden per sample; reads of the
        # token and position rows plus the output write.
        elements = T * h
        return OpCost(op, 2 * elements, width * (elements + 2 * elements))
    if op is OpClass.RESIDUAL:
        elements = 2 * L * T * h
        return OpCost(op, RESIDUAL_FLOPS_PER_ELEMENT * elements, width * 3 * elements)
    raise ValueError(f"unknown op class {op_class!r}")


def attainable(spec: HardwareSpec, dtype: Dtype, intensity: float) -> float:
    """min(peak compute, bandwidth * intensity) in FLOP/s."""
    if not intensity > 0:
        raise ValueError("intensity must be positive")
    peak = spec.peak_flops[dtype]
    if intensity >= spec.ridge(dtype):
        return peak
    # Just below the ridge the product can round up onto the peak; keep the
    # memory-bound side strictly under it so classify() and this agree.
    return min(math.nextafter(peak, 0.0), spec.bandwidth * intensity)


def classify(spec: HardwareSpec, dtype: Dtype, cost: OpCost | float) -> Bound:
    """Compute-bound iff intensity >= ridge point; ties go to compute-bound."""
    intensity = cost.intensity if isinstance(cost, OpCost) else float(cost)
    return Bound.COMPUTE if intensity >= spec.ridge(dtype) else Bound.MEMORY


@dataclass(frozen=True)
class RooflineRow:
    op_class: OpClass
    dtype: Dtype
    flops: int
    bytes: int
    intensity: float
    attainable_flops: float
    bound: Bound
    reference_band: str | None

    def csv_row(self) -> dict[str, Any]:
        return {"op_class": self.op_class.value, "flops": self.flops, "bytes": self.bytes,
                "intensity": self.intensity, "attainable_flops": self.attainable_flops,
                "bound": self.bound.value}

    def to_dict(self) -> dict[str, Any]:
        return {**self.csv_row(), "dtype": self.dtype.value, "reference_band": self.reference_band}


# Classes that only occur inside transformer layers.
PER_LAYER_ONLY = frozenset({OpClass.ATTENTION_SCORE_MATMUL, OpClass.SOFTMAX,
                            OpClass.ACTIVATION, OpClass.RESIDUAL})

CSV_COLUMNS = ("op_class", "flops", "bytes", "intensity", "attainable_flops", "bound")


def roofline_report(
    spec: HardwareSpec,
    config: ModelConfig,
    batch: int,
    seq: int,
    dtypes: Mapping[OpClass, Dtype] | Dtype = Dtype.F16E,
) -> list[RooflineRow]:
    """Cost, attainable throughput and boundedness for every op class present.

    ``dtypes`` gives the execution dtype per class (e.g. from a policy); a
    single Dtype applies to all classes. A zero-layer model reports only the
    classes that still run (embedding, final layernorm, output projection).
    """
    if isinstance(dtypes, Dtype):
        dtypes = {c: dtypes for c in OpClass}
    rows = []
    for op in OpClass:
        if config.num_layers == 0 and op in PER_LAYER_ONLY:
            continue
        dt = dtypes[op]
        cost = op_cost(op, config, batch, seq, dt.width)
        rows.append(RooflineRow(op, dt, cost.flops, cost.bytes, cost.intensity,
                                attainable(spec, dt, cost.intensity), classify(spec, dt, cost),
                                REFERENCE_BANDS.get(op)))
    return rows

