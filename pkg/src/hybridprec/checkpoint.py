"""Binary checkpoint format and numerical parity verification.

Layout (little-endian)::

    b"PRLABCKP"                 8-byte magic
    u32 version                 currently 1
    u32 n, n bytes              JSON model config
    repeated until EOF:
        u32 n, n bytes          tensor name (utf-8)
        u8  dtype tag           0 = f32, 1 = f16
        u32 rank
        u64 * rank              extents
        payload                 prod(extents) * width bytes
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .fidelity import FidelityReport, compare_logits
from .model import Model, ModelConfig, forward
from .numerics import Dtype
from .policy import PrecisionPolicy

MAGIC = b"PRLABCKP"
VERSION = 1
PARITY_THRESHOLD = 1e-4

_TAGS = {Dtype.F32: 0, Dtype.F16E: 1}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    offset: int
    nbytes: int


@dataclass(frozen=True)
class CheckpointIndex:
    config: ModelConfig
    header_bytes: int
    records: list[TensorRecord]

    @property
    def payload_bytes(self) -> int:
        return sum(r.nbytes for r in self.records)


def _payload(arr: np.ndarray, dtype: Dtype) -> bytes:
    if dtype is Dtype.F16E:
        return nx.to_bits16(arr).astype("<u2").tobytes()
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def serialize_checkpoint(model: Model, dtype: Dtype, path: str | Path) -> int:
    """Write ``model`` with every tensor stored as ``dtype``; returns bytes written."""
    dtype = Dtype(dtype)
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, arr in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", _TAGS[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(_payload(arr, dtype))
    data = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return len(data)


def _read(path: str | Path, load_payload: bool):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        version, n = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 16
        config = ModelConfig.from_dict(json.loads(data[pos:pos + n]))
        pos += n
        header = pos
        records, tensors = [], {}
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode()
            pos += n
            tag, rank = struct.unpack_from("<BI", data, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            dtype = _DTYPES[tag]
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * dtype.width
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            records.append(TensorRecord(name, dtype, tuple(shape), pos, nbytes))
            header += 4 + n + 5 + 8 * rank
            if load_payload:
                if dtype is Dtype.F16E:
                    arr = nx.from_bits16(np.frombuffer(data, "<u2", count, pos))
                else:
                    arr = np.frombuffer(data, "<f4", count, pos).astype(np.float32)
                tensors[name] = arr.reshape(shape)
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return CheckpointIndex(config, header, records), tensors


def inspect_checkpoint(path: str | Path) -> CheckpointIndex:
    return _read(path, load_payload=False)[0]


def load_checkpoint(path: str | Path) -> Model:
    index, tensors = _read(path, load_payload=True)
    return Model(index.config, tensors)


@dataclass
class ParityReport:
    fidelity: FidelityReport
    threshold: float
    passed: bool

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return {**self.fidelity.to_dict(), "threshold": self.threshold, "status": self.status}


def parity_from_logits(baseline, candidate, threshold: float = PARITY_THRESHOLD) -> ParityReport:
    """PASS iff every logit is finite and the max abs error is strictly below threshold."""
    rep = compare_logits(baseline, candidate)
    passed = rep.nan_runs == 0 and rep.max_abs_error < threshold
    return ParityReport(rep, threshold, bool(passed))


def verify_parity(model_a: Model, model_b: Model, probe_tokens,
                  policy: PrecisionPolicy | str = "fp32",
                  threshold: float = PARITY_THRESHOLD) -> ParityReport:
    if model_a.config != model_b.config:
        raise CheckpointError("parity check needs models with the same config")
    a = forward(model_a, probe_tokens, policy).logits
    b = forward(model_b, probe_tokens, policy).logits
    return parity_from_logits(a, b, threshold)
