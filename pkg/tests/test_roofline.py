import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridprec.model import PRESETS, preset
from hybridprec.numerics import Dtype
from hybridprec.policy import OpClass
from hybridprec.roofline import (
    CSV_COLUMNS,
    HARDWARE_PRESETS,
    Bound,
    HardwareSpec,
    attainable,
    classify,
    hardware_spec,
    matmul_cost,
    op_cost,
    roofline_report,
)

RTX = HARDWARE_PRESETS["rtx3090"]
BERT = PRESETS["bert-base"]


def test_square_matmul_intensity():
    c32 = matmul_cost(1024, 1024, 1024, Dtype.F32.width)
    c16 = matmul_cost(1024, 1024, 1024, Dtype.F16E.width)
    assert c32.flops == 2 * 1024 ** 3
    assert c32.intensity == pytest.approx(170.6667, abs=1e-4)
    assert c16.intensity == 2 * c32.intensity
    assert classify(RTX, Dtype.F16E, c32) is Bound.COMPUTE


def test_softmax_intensity():
    c = op_cost(OpClass.SOFTMAX, BERT, 1, 128, 4)
    assert c.intensity == 0.625


def test_attainable_and_ridge():
    assert attainable(RTX, Dtype.F16E, 1.5) == pytest.approx(1.4043e12, rel=1e-3)
    assert classify(RTX, Dtype.F16E, 1.5) is Bound.MEMORY
    assert attainable(RTX, Dtype.F16E, 1e6) == 142.3e12
    assert RTX.ridge(Dtype.F16E) == pytest.approx(152.0, rel=1e-3)
    ridge = RTX.ridge(Dtype.F16E)
    assert classify(RTX, Dtype.F16E, ridge) is Bound.COMPUTE
    assert attainable(RTX, Dtype.F16E, ridge) == 142.3e12
    with pytest.raises(ValueError):
        attainable(RTX, Dtype.F16E, 0.0)


def test_embedding_is_memory_bound():
    c = op_cost(OpClass.EMBEDDING, BERT, 1, 128, 2)
    assert c.intensity == pytest.approx(1 / 3)
    assert classify(RTX, Dtype.F16E, c) is Bound.MEMORY


spec_st = st.builds(
    lambda p, b: HardwareSpec("rand", {Dtype.F16E: p, Dtype.F32: p / 4}, b),
    st.floats(1e9, 1e15), st.floats(1e8, 1e13),
)


@given(spec_st, st.floats(1e-3, 1e4))
def test_classify_consistent_with_attainable(spec, intensity):
    for dt in Dtype:
        peak = spec.peak_flops[dt]
        got = attainable(spec, dt, intensity)
        assert (classify(spec, dt, intensity) is Bound.COMPUTE) == (got == peak)
        assert got <= peak


@given(spec_st, st.floats(1e-3, 1e4), st.floats(1e-3, 1e4))
def test_attainable_monotone(spec, a, b):
    lo, hi = sorted((a, b))
    assert attainable(spec, Dtype.F16E, lo) <= attainable(spec, Dtype.F16E, hi)


@given(spec_st, st.floats(1e-3, 1e4))
def test_attainable_below_ridge_is_bandwidth_bound(spec, intensity):
    if intensity < spec.ridge(Dtype.F16E) * (1 - 1e-9):
        assert attainable(spec, Dtype.F16E, intensity) == spec.bandwidth * intensity


@pytest.mark.parametrize("op", list(OpClass))
def test_halving_width_doubles_intensity(op):
    c32 = op_cost(op, BERT, 2, 64, 4)
    c16 = op_cost(op, BERT, 2, 64, 2)
    assert c16.flops == c32.flops and c32.bytes == 2 * c16.bytes


def test_report_rows_and_columns():
    rows = roofline_report(RTX, BERT, 1, 128)
    assert [r.op_class for r in rows] == list(OpClass)
    assert tuple(rows[0].csv_row()) == CSV_COLUMNS
    lin = rows[0]
    assert lin.reference_band == ">=45"
    # cold-traffic linear intensity sits just under the fp16 ridge at seq 128
    assert 100 < lin.intensity < RTX.ridge(Dtype.F16E)


def test_report_with_policy_dtypes():
    dtypes = {c: Dtype.F32 for c in OpClass} | {OpClass.LINEAR: Dtype.F16E}
    rows = {r.op_class: r for r in roofline_report(RTX, BERT, 1, 128, dtypes)}
    assert rows[OpClass.LINEAR].dtype is Dtype.F16E and rows[OpClass.SOFTMAX].dtype is Dtype.F32


def test_zero_layer_report_keeps_embedding_norm_and_projection():
    rows = roofline_report(RTX, preset("toy-decoder", num_layers=0), 1, 16)
    assert {r.op_class for r in rows} == {OpClass.EMBEDDING, OpClass.LAYERNORM, OpClass.LINEAR}


def test_hardware_spec_resolution():
    assert hardware_spec("rtx3090") is RTX
    custom = hardware_spec({"name": "x", "peak_flops": {"f16": 2e12, "f32": 1e12}, "bandwidth": 1e11})
    assert custom.ridge(Dtype.F16E) == 20.0
    assert HardwareSpec.from_dict(custom.to_dict()) == custom
    with pytest.raises(ValueError):
        hardware_spec("a100")
    with pytest.raises(ValueError):
        HardwareSpec("bad", {Dtype.F16E: 1.0}, 0.0)
    with pytest.raises(ValueError):
        op_cost("conv", BERT, 1, 1, 2)
