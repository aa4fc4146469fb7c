import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kwsimc.fixedpoint import (
    ACC_FMT,
    ACT_FMT,
    ERROR_FMT,
    WEIGHT_FMT,
    DivisionByZero,
    FixedPointError,
    QFormat,
    QValue,
    RoundMode,
    convert_raw,
    dequantize,
    divide_raw,
    exp_lut,
    exp_lut_raw,
    exp_table_aligned,
    fixed_divide,
    qadd,
    qmul,
    qsub,
    quantize,
    quantize_raw,
    restoring_divide,
    round_div,
    shift_round,
)

FORMATS = [WEIGHT_FMT, ACT_FMT, ACC_FMT, QFormat(2, 5)]
finite = st.floats(-300, 300, allow_nan=False, allow_infinity=False)


def q(x, fmt=WEIGHT_FMT):
    return quantize(x, fmt)


def test_format_ranges():
    assert WEIGHT_FMT.total_bits == 8 and ACC_FMT.total_bits == 16
    assert ACT_FMT.min_value == -8.0 and ACT_FMT.max_value == 8 - 1 / 16
    assert WEIGHT_FMT.resolution == 1 / 128
    assert QFormat.parse("Q(1,3,4)") == ACT_FMT
    with pytest.raises(FixedPointError):
        QFormat(8, 8)
    with pytest.raises(FixedPointError):
        QFormat(0, 7, sign_bits=0)


def test_quantize_examples():
    assert q(0.5).raw == 64
    assert quantize(0.003, WEIGHT_FMT, RoundMode.NEAREST_EVEN).raw == 0
    sat = q(2.0)
    assert sat.raw == 127 and sat.value == 0.9921875 and sat.saturated
    assert q(-5.0).raw == -128


def test_rounding_modes():
    assert quantize(1.5 / 128, WEIGHT_FMT).raw == 2
    assert quantize(2.5 / 128, WEIGHT_FMT).raw == 2
    assert quantize(2.5 / 128, WEIGHT_FMT, RoundMode.TOWARD_ZERO).raw == 2
    assert quantize(-2.9 / 128, WEIGHT_FMT, RoundMode.TOWARD_ZERO).raw == -2
    assert quantize(2.5 / 128, WEIGHT_FMT, RoundMode.NEAREST_AWAY).raw == 3
    assert quantize(-2.5 / 128, WEIGHT_FMT, RoundMode.NEAREST_AWAY).raw == -3


def test_arithmetic_examples():
    assert qadd(q(0.25), q(0.25)).value == 0.5
    assert qsub(q(0.25), q(0.5)).value == -0.25
    assert qmul(q(0.5), q(0.5)).value == 0.25
    assert qmul(q(0.9921875), q(0.9921875)).value == 0.984375
    assert qadd(q(0.75), q(0.75)).raw == 127


def test_divide_examples():
    one = quantize(1.0, ACT_FMT)
    assert fixed_divide(one, quantize(2.0, ACT_FMT)).value == 0.5
    assert fixed_divide(quantize(0.0078125, WEIGHT_FMT), one).raw == 1
    third = fixed_divide(one, quantize(3.0, ACT_FMT))
    assert third.raw == 42 and third.value == 0.328125
    assert fixed_divide(quantize(-1.0, ACT_FMT), quantize(3.0, ACT_FMT)).raw == -42
    with pytest.raises(DivisionByZero):
        fixed_divide(one, QValue(0, ACT_FMT))


def test_exp_lut_examples():
    assert exp_lut(quantize(0.0, ACT_FMT)).value == 1.0
    # e^-8 is below the resolution of an 8-bit activation word
    assert quantize(exp_lut(quantize(-8.0, ACT_FMT)).value, ACT_FMT).raw == 0
    aligned = exp_table_aligned()
    assert len(aligned) == 256 and np.all(np.diff(aligned) >= 0)
    assert int(aligned.max()) * 10 < 2**31
    assert exp_lut_raw(np.array([0]))[0] == 1 << 15


@given(st.integers(0, 2**20), st.integers(1, 2**12))
def test_restoring_divide_matches_floor(num, den):
    qt, over = restoring_divide(num, den, 16)
    assert qt == min(num // den, 2**16 - 1)
    assert over == (num // den > 2**16 - 1)


@given(st.integers(0, 2**14), st.integers(1, 2**14))
def test_divide_raw_matches_scalar(num, den):
    scalar = fixed_divide(QValue(num, ACC_FMT), QValue(den, ACC_FMT))
    assert divide_raw(np.array([num]), np.array([den]), 7)[0] == scalar.raw


@given(finite, st.sampled_from(FORMATS))
def test_saturation_bound(x, fmt):
    v = dequantize(quantize(x, fmt))
    assert fmt.min_value <= v <= fmt.max_value


@given(st.integers(-(2**15), 2**15 - 1), st.sampled_from(FORMATS))
def test_round_trip_representable(raw, fmt):
    raw = min(max(raw, fmt.raw_min), fmt.raw_max)
    x = raw * fmt.resolution
    assert quantize(x, fmt).raw == raw
    assert quantize(dequantize(quantize(x, fmt)), fmt).raw == raw


@given(finite, finite, st.sampled_from(FORMATS), st.sampled_from(list(RoundMode)))
def test_monotone(x, y, fmt, mode):
    lo, hi = sorted((x, y))
    assert quantize(lo, fmt, mode).raw <= quantize(hi, fmt, mode).raw


@given(st.integers(-(2**20), 2**20), st.integers(1, 2**10), st.sampled_from(list(RoundMode)))
def test_round_div_scalar_matches_vector(num, den, mode):
    assert round_div(num, den, mode) == int(round_div(np.array([num]), np.array([den]), mode)[0])
    exact = num / den
    got = round_div(num, den, mode)
    assert abs(got - exact) <= (1 if mode is RoundMode.TOWARD_ZERO else 0.5)


@given(st.integers(-(2**15), 2**15), st.integers(0, 12))
def test_shift_round_matches_float(raw, shift):
    assert shift_round(raw, shift) == round_div(raw, 1 << shift)
    assert abs(shift_round(raw, shift) - raw / 2**shift) <= 0.5


@given(st.lists(st.integers(-128, 127), min_size=3, max_size=3))
def test_associative_at_full_width(raws):
    a, b, c = (QValue(r, WEIGHT_FMT) for r in raws)
    left = qadd(qadd(a, b, ACC_FMT), c, ACC_FMT)
    right = qadd(a, qadd(b, c, ACC_FMT), ACC_FMT)
    assert left == right


def test_vector_and_scalar_quantize_agree():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 3, 1000)
    raw, sat = quantize_raw(x, ACT_FMT)
    for xi, ri, si in zip(x, raw, sat):
        qv = quantize(float(xi), ACT_FMT)
        assert qv.raw == ri and qv.saturated == si


def test_convert_raw_saturates():
    assert convert_raw(np.array([1 << 12]), ACC_FMT, ERROR_FMT)[0] == ERROR_FMT.raw_max
    assert convert_raw(np.array([3]), 8, ERROR_FMT)[0] == 2


def test_non_finite_rejected():
    with pytest.raises(FixedPointError):
        quantize(math.nan, WEIGHT_FMT)
    with pytest.raises(FixedPointError):
        quantize_raw(np.array([np.inf]), WEIGHT_FMT)


def test_deterministic():
    a = quantize_raw(np.linspace(-2, 2, 1001), WEIGHT_FMT)[0]
    b = quantize_raw(np.linspace(-2, 2, 1001), WEIGHT_FMT)[0]
    assert np.array_equal(a, b)
