"""Operation classes and named precision policies."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from .numerics import Dtype, KernelConfig


class OpClass(str, enum.Enum):
    LINEAR = "linear"
    ATTENTION_SCORE_MATMUL = "attention_score_matmul"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    ACTIVATION = "activation"
    EMBEDDING = "embedding"
    RESIDUAL = "residual"

    @classmethod
    def parse(cls, name: str | OpClass) -> OpClass:
        if isinstance(name, OpClass):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "attentionscorematmul": cls.ATTENTION_SCORE_MATMUL,
            "attention": cls.ATTENTION_SCORE_MATMUL,
            "layer_norm": cls.LAYERNORM,
        }
        if key in aliases:
            return aliases[key]
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown op class {name!r}; valid: {[m.value for m in cls]}")


OTHER = "other"  # latency bucket not attributed to any op class

F32 = KernelConfig(Dtype.F32, Dtype.F32, True)
F16_ACC32 = KernelConfig(Dtype.F16E, Dtype.F32, True)
F16_ACC16_UNSTABLE = KernelConfig(Dtype.F16E, Dtype.F16E, False)


class UnknownPolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PrecisionPolicy:
    name: str
    assignment: Mapping[OpClass, KernelConfig]
    expected_latency_share: Mapping[str, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        missing = [c.value for c in OpClass if c not in self.assignment]
        if missing:
            raise ValueError(f"policy {self.name!r} has no entry for {missing}")
        if self.expected_latency_share is not None:
            _check_shares(self.expected_latency_share)

    def __getitem__(self, op: OpClass) -> KernelConfig:
        return self.assignment[op]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "assignment": {
                c.value: {
                    "dtype": self.assignment[c].compute_dtype.value,
                    "accum": self.assignment[c].accum_dtype.value,
                    "stabilized": self.assignment[c].softmax_stabilized,
                }
                for c in OpClass
            },
        }


def _uniform(name: str, cfg: KernelConfig) -> PrecisionPolicy:
    return PrecisionPolicy(name, {c: cfg for c in OpClass})


def _hybrid() -> PrecisionPolicy:
    assignment = {c: F32 for c in OpClass}
    assignment[OpClass.LINEAR] = F16_ACC32
    assignment[OpClass.ATTENTION_SCORE_MATMUL] = F16_ACC32
    # GELU sits between the two FFN projections and stays on the fp16 path.
    assignment[OpClass.ACTIVATION] = F16_ACC32
    return PrecisionPolicy("hybrid", assignment)


_BUILTIN = {
    "fp32": lambda: _uniform("fp32", F32),
    "full_fp16": lambda: _uniform("full_fp16", F16_ACC16_UNSTABLE),
    "hybrid": _hybrid,
}
POLICY_NAMES = tuple(_BUILTIN)


def _kernel_config(entry: Mapping[str, Any], base: KernelConfig) -> KernelConfig:
    dtype = Dtype(entry.get("dtype", base.compute_dtype.value))
    accum = Dtype(entry.get("accum", Dtype.F32.value if dtype is Dtype.F32 else base.accum_dtype.value))
    stabilized = bool(entry.get("stabilized", base.softmax_stabilized))
    return KernelConfig(dtype, accum, stabilized)


def resolve_policy(spec: str | Mapping[str, Any] | PrecisionPolicy) -> PrecisionPolicy:
    """Resolve a policy name or custom mapping into a total PrecisionPolicy.

    A custom spec looks like::

        {"name": "ln16", "base": "hybrid",
         "overrides": {"layernorm": {"dtype": "f16", "accum": "f32"}}}

    Classes not mentioned in ``overrides`` inherit from ``base`` (default
    ``hybrid``).
    """
    if isinstance(spec, PrecisionPolicy):
        return spec
    if isinstance(spec, str):
        if spec not in _BUILTIN:
            raise UnknownPolicyError(
                f"unknown policy {spec!r}; valid names: {', '.join(POLICY_NAMES)}"
            )
        return _BUILTIN[spec]()
    base = resolve_policy(spec.get("base", "hybrid"))
    assignment = dict(base.assignment)
    for key, entry in (spec.get("overrides") or {}).items():
        op = OpClass.parse(key)
        assignment[op] = _kernel_config(entry, assignment[op])
    return PrecisionPolicy(str(spec.get("name", "custom")), assignment,
                           spec.get("expected_latency_share"))


def _check_shares(shares: Mapping[str, float]) -> None:
    for key, value in shares.items():
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"share for {key!r} must lie in [0, 1], got {value}")
    total = math.fsum(shares.values())
    if total > 1.0 + 1e-9:
        raise ValueError(f"latency shares sum to {total:.6f} > 1")


def predicted_fp16_speedup(
    policy: PrecisionPolicy,
    shares: Mapping[OpClass | str, float],
    per_class_gain: Mapping[OpClass | str, float],
) -> float:
    """Amdahl estimate of end-to-end speedup from running classes in fp16.

    A class only gets its gain if ``policy`` actually runs it in F16E.
    Keys that are not op classes (e.g. ``"other"``) and the unassigned
    remainder of the share budget keep gain 1.
    """
    norm_shares: dict[str, float] = {}
    for key, value in shares.items():
        norm_shares[_key(key)] = float(value)
    _check_shares(norm_shares)
    gains = {_key(k): float(v) for k, v in per_class_gain.items()}
    for key, g in gains.items():
        if not g > 0:
            raise ValueError(f"gain for {key!r} must be positive")

    # Sum the time saved rather than the time spent so unit gains give exactly 1.
    saved = []
    for key, share in norm_shares.items():
        try:
            op = OpClass.parse(key)
        except ValueError:
            continue
        if policy[op].compute_dtype is Dtype.F16E:
            saved.append(share - share / gains.get(key, 1.0))
    return 1.0 / (1.0 - math.fsum(saved))


def _key(k: OpClass | str) -> str:
    if isinstance(k, OpClass):
        return k.value
    try:
        return OpClass.parse(k).value
    except ValueError:
        return str(k)
