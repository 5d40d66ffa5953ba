import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridprec.numerics import Dtype
from hybridprec.policy import (
    POLICY_NAMES,
    OpClass,
    PrecisionPolicy,
    UnknownPolicyError,
    predicted_fp16_speedup,
    resolve_policy,
)
from hybridprec.policy import F32 as F32_CFG


def test_builtin_policies():
    fp32 = resolve_policy("fp32")
    assert all(fp32[c].compute_dtype is Dtype.F32 and fp32[c].accum_dtype is Dtype.F32
               and fp32[c].softmax_stabilized for c in OpClass)
    hybrid = resolve_policy("hybrid")
    assert hybrid[OpClass.SOFTMAX].compute_dtype is Dtype.F32
    assert hybrid[OpClass.LAYERNORM].compute_dtype is Dtype.F32
    assert hybrid[OpClass.LINEAR].compute_dtype is Dtype.F16E
    assert hybrid[OpClass.LINEAR].accum_dtype is Dtype.F32
    full = resolve_policy("full_fp16")
    assert all(full[c].compute_dtype is Dtype.F16E for c in OpClass)
    assert not full[OpClass.SOFTMAX].softmax_stabilized


@pytest.mark.parametrize("name", POLICY_NAMES)
def test_resolution_is_pure(name):
    assert resolve_policy(name) == resolve_policy(name)
    d = resolve_policy(name).to_dict()
    assert resolve_policy({"name": name, "base": "fp32", "overrides": d["assignment"]}) == resolve_policy(name)


def test_custom_override_inherits_hybrid():
    custom = resolve_policy({"name": "ln16", "overrides": {"LayerNorm": {"dtype": "f16", "accum": "f32"}}})
    hybrid = resolve_policy("hybrid")
    assert custom[OpClass.LAYERNORM].compute_dtype is Dtype.F16E
    for c in OpClass:
        if c is not OpClass.LAYERNORM:
            assert custom[c] == hybrid[c]
    assert custom.name == "ln16"


def test_override_to_f32_resets_accumulator():
    p = resolve_policy({"base": "full_fp16", "overrides": {"softmax": {"dtype": "f32"}}})
    assert p[OpClass.SOFTMAX].accum_dtype is Dtype.F32


def test_unknown_policy_and_op():
    with pytest.raises(UnknownPolicyError, match="fp32"):
        resolve_policy("bf16")
    with pytest.raises(ValueError):
        resolve_policy({"overrides": {"conv": {"dtype": "f16"}}})


def test_policy_must_be_total():
    with pytest.raises(ValueError, match="no entry"):
        PrecisionPolicy("partial", {OpClass.LINEAR: F32_CFG})


def test_latency_shares_validated():
    full = {c: F32_CFG for c in OpClass}
    with pytest.raises(ValueError):
        PrecisionPolicy("x", full, {"linear": 0.8, "softmax": 0.4})
    with pytest.raises(ValueError):
        PrecisionPolicy("x", full, {"linear": -0.1})


def test_opclass_aliases():
    assert OpClass.parse("AttentionScoreMatmul") is OpClass.ATTENTION_SCORE_MATMUL
    assert OpClass.parse("layer-norm") is OpClass.LAYERNORM
    with pytest.raises(ValueError):
        OpClass.parse("pooling")


SHARES = {"linear": 0.611, "softmax": 0.083, "layernorm": 0.061, "embedding": 0.042, "other": 0.203}


def test_amdahl_with_published_shares():
    s = predicted_fp16_speedup(resolve_policy("full_fp16"), SHARES, {"linear": 2.0})
    assert s == pytest.approx(1.0 / (1 - 0.611 / 2), rel=1e-12)
    assert s == pytest.approx(1.44, abs=0.005)
    # hybrid runs linear in fp16 too, so it gets the same linear gain
    assert predicted_fp16_speedup(resolve_policy("hybrid"), SHARES, {"linear": 2.0}) == s


def test_amdahl_edge_cases():
    full = resolve_policy("full_fp16")
    assert predicted_fp16_speedup(full, SHARES, {k: 1.0 for k in SHARES}) == 1.0
    assert predicted_fp16_speedup(full, {"linear": 1.0}, {"linear": 2.0}) == 2.0
    assert predicted_fp16_speedup(resolve_policy("fp32"), SHARES, {"linear": 2.0}) == 1.0
    with pytest.raises(ValueError):
        predicted_fp16_speedup(full, SHARES, {"linear": 0.0})


@given(st.floats(0.0, 1.0), st.floats(1.0, 10.0))
def test_amdahl_bounded_by_gain(share, gain):
    s = predicted_fp16_speedup(resolve_policy("full_fp16"), {"linear": share}, {"linear": gain})
    assert 1.0 <= s <= gain * (1 + 1e-12)
