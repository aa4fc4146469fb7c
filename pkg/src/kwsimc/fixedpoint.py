"""Fixed-point formats and integer arithmetic for the accelerator datapath.

Every value is carried as an integer mantissa plus a :class:`QFormat`.
Scalar helpers work on :class:`QValue`; the ``*_raw`` helpers are the
vectorised numpy equivalents used by the tensor and training code. Both
share the same rounding kernels so they agree bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class RoundMode(str, enum.Enum):
    NEAREST_EVEN = "nearest-even"
    TOWARD_ZERO = "toward-zero"
    # ties away from zero; used by the shift-based weight update so that a
    # gradient exactly at the accumulation threshold still moves one LSB
    NEAREST_AWAY = "nearest-away"


class FixedPointError(ValueError):
    pass


class DivisionByZero(FixedPointError, ZeroDivisionError):
    pass


@dataclass(frozen=True)
class QFormat:
    """Signed fixed-point format Q(1, int_bits, frac_bits)."""

    int_bits: int
    frac_bits: int
    sign_bits: int = field(default=1, repr=False)

    def __post_init__(self):
        if self.sign_bits != 1:
            raise FixedPointError("only signed formats with one sign bit exist")
        if self.int_bits < 0 or self.frac_bits < 0:
            raise FixedPointError(f"negative field width in {self}")
        if self.total_bits > 16:
            raise FixedPointError(f"{self} needs {self.total_bits} bits, limit is 16")

    @property
    def total_bits(self) -> int:
        return self.sign_bits + self.int_bits + self.frac_bits

    @property
    def raw_min(self) -> int:
        return -(1 << (self.int_bits + self.frac_bits))

    @property
    def raw_max(self) -> int:
        return (1 << (self.int_bits + self.frac_bits)) - 1

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.raw_min * self.resolution

    @property
    def max_value(self) -> float:
        return self.raw_max * self.resolution

    def __str__(self) -> str:
        return f"Q(1,{self.int_bits},{self.frac_bits})"

    @classmethod
    def parse(cls, text: str) -> "QFormat":
        """Parse ``"Q(1,3,4)"`` or ``"1,3,4"``."""
        body = text.strip()
        if body.upper().startswith("Q(") and body.endswith(")"):
            body = body[2:-1]
        parts = [int(p) for p in body.split(",")]
        if len(parts) != 3:
            raise FixedPointError(f"cannot parse format {text!r}")
        return cls(int_bits=parts[1], frac_bits=parts[2], sign_bits=parts[0])


WEIGHT_FMT = QFormat(0, 7)
ACT_FMT = QFormat(3, 4)
GRAD_FMT = QFormat(0, 7)
ERROR_FMT = QFormat(0, 7)
ACC_FMT = QFormat(7, 8)
AUDIO_FMT = QFormat(0, 7)


@dataclass(frozen=True)
class QValue:
    """An integer mantissa in a given format; value = raw * 2**-frac_bits.

    Out-of-range mantissas saturate at construction and set ``saturated``.
    """

    raw: int
    fmt: QFormat
    saturated: bool = field(default=False, compare=False)

    def __post_init__(self):
        raw = int(self.raw)
        clipped = min(max(raw, self.fmt.raw_min), self.fmt.raw_max)
        object.__setattr__(self, "raw", clipped)
        if clipped != raw:
            object.__setattr__(self, "saturated", True)

    @property
    def value(self) -> float:
        return self.raw * self.fmt.resolution

    def __float__(self) -> float:
        return self.value

    def __repr__(self) -> str:
        return f"QValue({self.value!r}, raw={self.raw}, {self.fmt})"


# -- rounding kernels -------------------------------------------------------

def round_div(num, den, mode: RoundMode = RoundMode.NEAREST_EVEN):
    """Integer ``num / den`` rounded per ``mode``; ``den > 0``.

    Works elementwise on python ints or int64 arrays.
    """
    mode = RoundMode(mode)
    if isinstance(num, np.ndarray) or isinstance(den, np.ndarray):
        num = np.asarray(num, dtype=np.int64)
        den = np.asarray(den, dtype=np.int64)
        q, r = np.divmod(num, den)  # floor division, 0 <= r < den
        if mode is RoundMode.TOWARD_ZERO:
            return np.where((r != 0) & (num < 0), q + 1, q)
        twice = 2 * r
        if mode is RoundMode.NEAREST_EVEN:
            up = (twice > den) | ((twice == den) & (q % 2 == 1))
        else:
            up = (twice > den) | ((twice == den) & (num >= 0))
        return np.where(up, q + 1, q)
    num, den = int(num), int(den)
    q, r = divmod(num, den)
    if mode is RoundMode.TOWARD_ZERO:
        return q + 1 if (r and num < 0) else q
    twice = 2 * r
    if twice > den:
        return q + 1
    if twice == den:
        if mode is RoundMode.NEAREST_EVEN:
            return q + (q & 1)
        return q + 1 if num >= 0 else q
    return q


def shift_round(raw, shift: int, mode: RoundMode = RoundMode.NEAREST_EVEN):
    """Multiply a mantissa by ``2**-shift`` (negative shift scales up)."""
    if shift <= 0:
        if isinstance(raw, np.ndarray):
            return np.asarray(raw, dtype=np.int64) << (-shift)
        return int(raw) << (-shift)
    return round_div(raw, 1 << shift, mode)


def saturate_raw(raw, fmt: QFormat):
    """Clip mantissas to ``fmt``; returns ``(clipped, saturated_mask)``."""
    arr = np.asarray(raw, dtype=np.int64)
    clipped = np.clip(arr, fmt.raw_min, fmt.raw_max)
    return clipped, clipped != arr


def convert_raw(raw, src: QFormat | int, dst: QFormat, mode: RoundMode = RoundMode.NEAREST_EVEN):
    """Re-express mantissas from ``src`` (format or frac-bit count) in ``dst``."""
    src_frac = src if isinstance(src, int) else src.frac_bits
    out = shift_round(np.asarray(raw, dtype=np.int64), src_frac - dst.frac_bits, mode)
    return saturate_raw(out, dst)[0]


def _round_float(scaled, mode: RoundMode):
    if mode is RoundMode.NEAREST_EVEN:
        return np.rint(scaled)
    if mode is RoundMode.TOWARD_ZERO:
        return np.trunc(scaled)
    return np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)


def quantize_raw(x, fmt: QFormat, rounding: RoundMode = RoundMode.NEAREST_EVEN):
    """Vectorised quantize: real array -> ``(raw int64 array, saturated mask)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FixedPointError("cannot quantize non-finite values")
    # power-of-two scaling is exact in binary floating point
    scaled = _round_float(np.ldexp(x, fmt.frac_bits), RoundMode(rounding))
    scaled = np.clip(scaled, fmt.raw_min - 1, fmt.raw_max + 1)
    return saturate_raw(scaled.astype(np.int64), fmt)


def dequantize_raw(raw, fmt: QFormat | int) -> np.ndarray:
    frac = fmt if isinstance(fmt, int) else fmt.frac_bits
    return np.ldexp(np.asarray(raw, dtype=np.float64), -frac)


# -- scalar API -------------------------------------------------------------

def quantize(x: float, fmt: QFormat, rounding: RoundMode = RoundMode.NEAREST_EVEN) -> QValue:
    """Nearest representable value (per ``rounding``), saturated to ``fmt``."""
    if not math.isfinite(x):
        raise FixedPointError(f"cannot quantize {x!r}")
    raw, sat = quantize_raw(x, fmt, rounding)
    return QValue(int(raw), fmt, saturated=bool(sat))


def dequantize(q: QValue) -> float:
    return q.value


def _aligned(a: QValue, b: QValue):
    frac = max(a.fmt.frac_bits, b.fmt.frac_bits)
    return a.raw << (frac - a.fmt.frac_bits), b.raw << (frac - b.fmt.frac_bits), frac


def _to_fmt(raw: int, frac: int, out_fmt: QFormat, rounding: RoundMode) -> QValue:
    return QValue(shift_round(raw, frac - out_fmt.frac_bits, rounding), out_fmt)


def qadd(a: QValue, b: QValue, out_fmt: QFormat | None = None,
         rounding: RoundMode = RoundMode.NEAREST_EVEN) -> QValue:
    ra, rb, frac = _aligned(a, b)
    return _to_fmt(ra + rb, frac, out_fmt or a.fmt, rounding)


def qsub(a: QValue, b: QValue, out_fmt: QFormat | None = None,
         rounding: RoundMode = RoundMode.NEAREST_EVEN) -> QValue:
    ra, rb, frac = _aligned(a, b)
    return _to_fmt(ra - rb, frac, out_fmt or a.fmt, rounding)


def qmul(a: QValue, b: QValue, out_fmt: QFormat | None = None,
         rounding: RoundMode = RoundMode.NEAREST_EVEN) -> QValue:
    # full product of two <=16-bit mantissas fits in 32 bits
    frac = a.fmt.frac_bits + b.fmt.frac_bits
    return _to_fmt(a.raw * b.raw, frac, out_fmt or a.fmt, rounding)


# -- division ---------------------------------------------------------------

def restoring_divide(num: int, den: int, bits: int) -> tuple[int, bool]:
    """Unsigned restoring division, ``bits``-wide quotient.

    Returns ``(floor(num / den), overflow)``; on overflow the quotient is
    saturated to ``2**bits - 1``.
    """
    if den <= 0 or num < 0:
        raise FixedPointError("restoring_divide works on num >= 0, den > 0")
    q = 0
    rem = 0
    for i in range(num.bit_length() - 1, -1, -1):
        rem = (rem << 1) | ((num >> i) & 1)
        if rem >= den:
            rem -= den
            q |= 1 << i
    limit = (1 << bits) - 1
    if q > limit:
        return limit, True
    return q, False


def fixed_divide(num: QValue, den: QValue, out_fmt: QFormat = ERROR_FMT) -> QValue:
    """``num / den`` truncated toward zero into ``out_fmt`` (8-bit result)."""
    if den.raw == 0:
        raise DivisionByZero("fixed_divide by zero")
    # value = (n * 2^-fn) / (d * 2^-fd); out raw = value * 2^fo
    shift = out_fmt.frac_bits + den.fmt.frac_bits - num.fmt.frac_bits
    n, d = abs(num.raw), abs(den.raw)
    if shift >= 0:
        n <<= shift
    else:
        d <<= -shift
    q, overflow = restoring_divide(n, d, out_fmt.int_bits + out_fmt.frac_bits)
    negative = (num.raw < 0) != (den.raw < 0)
    raw = -q if negative else q
    return QValue(raw, out_fmt, saturated=overflow)


def divide_raw(num, den, frac_bits: int, fmt: QFormat = ERROR_FMT):
    """Vectorised toward-zero division ``num / den * 2**frac_bits`` into ``fmt``.

    Equivalent to :func:`restoring_divide` elementwise for ``num >= 0``.
    """
    num = np.asarray(num, dtype=np.int64)
    den = np.asarray(den, dtype=np.int64)
    if np.any(den == 0):
        raise DivisionByZero("divide_raw by zero")
    q = round_div(num << frac_bits, den, RoundMode.TOWARD_ZERO)
    return saturate_raw(q, fmt)[0]


# -- exponential look-up table ----------------------------------------------

EXP_TABLE_MANTISSA_BITS = 15
EXP_ALIGN_FRAC = 15


def _entry_format(value: float) -> QFormat:
    """Smallest integer field that holds ``value``; the rest goes to fraction."""
    for int_bits in range(EXP_TABLE_MANTISSA_BITS + 1):
        fmt = QFormat(int_bits, EXP_TABLE_MANTISSA_BITS - int_bits)
        if round(value * 2**fmt.frac_bits) <= fmt.raw_max:
            return fmt
    raise FixedPointError(f"exp value {value} does not fit 16 bits")


@lru_cache(maxsize=None)
def exp_table(in_fmt: QFormat = ACT_FMT) -> tuple[QValue, ...]:
    """The 2**total_bits-entry table of e**z, indexed by ``raw - raw_min``.

    Each entry is a 16-bit word with its own binary point, chosen so the
    mantissa is normalised; this keeps the relative error of every entry
    far below 2**-4 over the whole input range.
    """
    entries = []
    for raw in range(in_fmt.raw_min, in_fmt.raw_max + 1):
        value = math.exp(raw * in_fmt.resolution)
        fmt = _entry_format(value)
        entries.append(QValue(round(value * 2**fmt.frac_bits), fmt))
    return tuple(entries)


@lru_cache(maxsize=None)
def exp_table_aligned(in_fmt: QFormat = ACT_FMT) -> np.ndarray:
    """Table entries re-expressed with ``EXP_ALIGN_FRAC`` fraction bits (int64).

    Shifting left is exact; the largest entry stays below 2**27 so a sum of
    ten entries fits a 32-bit accumulator.
    """
    table = exp_table(in_fmt)
    out = np.array([e.raw << (EXP_ALIGN_FRAC - e.fmt.frac_bits) for e in table], dtype=np.int64)
    out.setflags(write=False)
    return out


def exp_lut(z: QValue) -> QValue:
    """Look up e**z for an activation-format input."""
    table = exp_table(z.fmt)
    return table[z.raw - z.fmt.raw_min]


def exp_lut_raw(z_raw, in_fmt: QFormat = ACT_FMT) -> np.ndarray:
    """Vectorised look-up returning aligned mantissas (``EXP_ALIGN_FRAC``)."""
    z = np.asarray(z_raw, dtype=np.int64)
    return exp_table_aligned(in_fmt)[z - in_fmt.raw_min]
