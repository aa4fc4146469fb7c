"""Reference layer primitives on fixed-point and binary tensors.

These are the noise-free digital kernels. Binary data is stored as int8
arrays holding -1/+1; the XNOR-popcount path packs them to bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixedpoint import (
    ACC_FMT,
    ACT_FMT,
    WEIGHT_FMT,
    QFormat,
    QValue,
    RoundMode,
    convert_raw,
    dequantize_raw,
    quantize_raw,
    round_div,
    saturate_raw,
    shift_round,
)


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class QTensor:
    """Row-major tensor of mantissas sharing one format."""

    data: np.ndarray
    fmt: QFormat

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.int64)
        clipped, _ = saturate_raw(data, self.fmt)
        object.__setattr__(self, "data", clipped)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @classmethod
    def from_real(cls, x, fmt: QFormat, rounding: RoundMode = RoundMode.NEAREST_EVEN) -> "QTensor":
        raw, _ = quantize_raw(x, fmt, rounding)
        return cls(raw, fmt)

    def to_real(self) -> np.ndarray:
        return dequantize_raw(self.data, self.fmt)

    def __getitem__(self, idx) -> QValue:
        return QValue(int(self.data[idx]), self.fmt)

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return self.fmt == other.fmt and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class BinTensor:
    """Tensor of +-1 values, held as int8."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.size and not np.all((data == 1) | (data == -1)):
            raise ValueError("BinTensor elements must be -1 or +1")
        object.__setattr__(self, "data", data.astype(np.int8))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @classmethod
    def from_bits(cls, bits) -> "BinTensor":
        """{0, 1} -> {-1, +1}."""
        return cls(2 * np.asarray(bits, dtype=np.int8) - 1)

    def to_bits(self) -> np.ndarray:
        return (self.data > 0).astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, BinTensor):
            return NotImplemented
        return np.array_equal(self.data, other.data)


def _as_pm1(x) -> np.ndarray:
    return x.data if isinstance(x, BinTensor) else np.asarray(x, dtype=np.int8)


# -- XNOR / popcount --------------------------------------------------------

def xnor_popcount_dot(w_bits: np.ndarray, x_bits: np.ndarray, n: int) -> np.ndarray:
    """Signed dot product of packed +-1 vectors along the last axis.

    ``w_bits``/``x_bits`` are uint8 arrays from :func:`numpy.packbits`
    (broadcastable); ``n`` is the number of valid (unpadded) bits. Padding
    bits must be equal in both operands so they count as matches, which
    are then removed.
    """
    xnor = np.bitwise_not(np.bitwise_xor(w_bits, x_bits))
    matches = np.bitwise_count(xnor).sum(axis=-1, dtype=np.int64)
    pad = 8 * w_bits.shape[-1] - n
    return 2 * (matches - pad) - n


def pack_pm1(x: np.ndarray) -> np.ndarray:
    """Pack +-1 along the last axis; padding bits are zero."""
    return np.packbits(np.asarray(x) > 0, axis=-1)


def pad_binary(x: np.ndarray, kernel: int) -> np.ndarray:
    """'same' padding for binary maps, using -1 as the pad value."""
    left = (kernel - 1) // 2
    right = kernel - 1 - left
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(left, right)], constant_values=-1)


def _windows(x: np.ndarray, kernel: int) -> np.ndarray:
    # (..., C, L + k - 1) -> (..., L, C, k)
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=-1)
    return np.moveaxis(win, -2, -3)


def _check_conv(in_ch: int, weights: np.ndarray, groups: int):
    if weights.ndim != 3:
        raise ShapeMismatch(f"weights must be (out, in/groups, kernel), got {weights.shape}")
    out_ch, per_group, _ = weights.shape
    if groups < 1 or in_ch % groups or out_ch % groups:
        raise ShapeMismatch(f"{in_ch} in / {out_ch} out channels not divisible by {groups} groups")
    if per_group != in_ch // groups:
        raise ShapeMismatch(f"weights expect {per_group} channels per group, input gives {in_ch // groups}")


def conv_sums(x: np.ndarray, weights: np.ndarray, groups: int = 1) -> np.ndarray:
    """Integer 'same' convolution sums of a +-1 map, no bias.

    ``x`` is (C, L) or (N, C, L). Exact integer arithmetic via float64 BLAS
    (all partial sums are far below 2**53).
    """
    x = _as_pm1(x)
    w = _as_pm1(weights)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    n, in_ch, length = x.shape
    _check_conv(in_ch, w, groups)
    out_ch, per_group, kernel = w.shape
    xp = pad_binary(x, kernel).astype(np.float64)
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=-1)  # (N, C, L, k)
    out_per = out_ch // groups
    out = np.empty((n, out_ch, length), dtype=np.int64)
    wf = w.astype(np.float64)
    for g in range(groups):
        xs = win[:, g * per_group:(g + 1) * per_group]          # (N, cpg, L, k)
        ws = wf[g * out_per:(g + 1) * out_per]                  # (opg, cpg, k)
        res = np.einsum("nclk,ock->nol", xs, ws, optimize=True)
        out[:, g * out_per:(g + 1) * out_per] = np.rint(res).astype(np.int64)
    return out[0] if squeeze else out


def binary_conv1d(x, weights, groups: int = 1, bias=None) -> np.ndarray:
    """Group convolution of +-1 data with +-1 weights via XNOR-popcount.

    ``x``: (C, L); ``weights``: (out, C/groups, kernel); ``bias``: integer per
    output channel. Returns int64 (out, L) with 'same' (-1) padding.
    """
    x = _as_pm1(x)
    w = _as_pm1(weights)
    if x.ndim != 2:
        raise ShapeMismatch(f"input must be (channels, length), got {x.shape}")
    in_ch, length = x.shape
    _check_conv(in_ch, w, groups)
    out_ch, per_group, kernel = w.shape
    if bias is None:
        bias = np.zeros(out_ch, dtype=np.int64)
    bias = np.asarray(bias, dtype=np.int64)
    if bias.shape != (out_ch,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({out_ch},)")
    win = _windows(pad_binary(x, kernel), kernel)  # (L, C, k)
    out_per = out_ch // groups
    n_terms = per_group * kernel
    out = np.empty((out_ch, length), dtype=np.int64)
    for g in range(groups):
        xs = win[:, g * per_group:(g + 1) * per_group].reshape(length, n_terms)
        ws = w[g * out_per:(g + 1) * out_per].reshape(out_per, n_terms)
        dots = xnor_popcount_dot(pack_pm1(ws)[:, None, :], pack_pm1(xs)[None, :, :], n_terms)
        out[g * out_per:(g + 1) * out_per] = dots
    return out + bias[:, None]


def sign_activation(x, offset=None) -> BinTensor:
    """+1 where ``x + offset >= 0`` else -1; offsets broadcast per channel."""
    x = np.asarray(x, dtype=np.int64)
    if offset is not None:
        offset = np.asarray(offset, dtype=np.int64)
        if offset.ndim == 1 and x.ndim >= 2:
            offset = offset[:, None]
        x = x + offset
    return BinTensor(np.where(x >= 0, 1, -1))


def channel_shuffle(x, groups: int):
    """Interleave channel groups: out channel ``(c % g) * (C/g) + c // g`` <- in ``c``.

    Accepts (C, L) or (N, C, L) +-1 data (BinTensor or array); returns the
    same kind it was given.
    """
    arr = _as_pm1(x)
    axis = arr.ndim - 2
    channels = arr.shape[axis]
    if groups < 1 or channels % groups:
        raise ShapeMismatch(f"{channels} channels not divisible by {groups} groups")
    perm = shuffle_permutation(channels, groups)
    out = np.empty_like(arr)
    idx = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    idx[axis] = np.arange(channels)
    dst[axis] = perm
    out[tuple(dst)] = arr[tuple(idx)]
    return BinTensor(out) if isinstance(x, BinTensor) else out


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Destination index of each source channel."""
    c = np.arange(channels)
    return (c % groups) * (channels // groups) + c // groups


def maxpool1d(x, width: int):
    """Non-overlapping max pool along the last axis (OR of +1 on binary data)."""
    arr = _as_pm1(x) if isinstance(x, BinTensor) else np.asarray(x)
    if width < 1 or arr.shape[-1] % width:
        raise ShapeMismatch(f"length {arr.shape[-1]} not divisible by pool {width}")
    if width == 1:
        return x
    pooled = arr.reshape(*arr.shape[:-1], arr.shape[-1] // width, width).max(axis=-1)
    return BinTensor(pooled) if isinstance(x, BinTensor) else pooled


def global_avg_pool(x, fmt: QFormat = ACT_FMT) -> QTensor:
    """Mean over the last axis of +-1 data, rounded once into ``fmt``.

    The channel sum is exact; the single rounding is nearest-even.
    """
    arr = _as_pm1(x).astype(np.int64)
    length = arr.shape[-1]
    total = arr.sum(axis=-1)
    raw = round_div(total << fmt.frac_bits, np.int64(length), RoundMode.NEAREST_EVEN)
    return QTensor(np.asarray(raw), fmt)


def fully_connected(x: QTensor, weight: QTensor, bias: QTensor,
                    out_fmt: QFormat = ACT_FMT, acc_fmt: QFormat = ACC_FMT) -> QTensor:
    """``quantize(W @ x + b)`` with a saturating 16-bit accumulator.

    Exact products are summed, moved into ``acc_fmt`` (nearest-even,
    saturating), the bias is added there, and the result is rounded into
    ``out_fmt``. ``x`` may be (N,) or (B, N).
    """
    if weight.data.ndim != 2:
        raise ShapeMismatch("weight must be 2-D (classes, features)")
    n_out, n_in = weight.shape
    if x.shape[-1] != n_in:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, weight expects {n_in}")
    if bias.shape != (n_out,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({n_out},)")
    prod_frac = weight.fmt.frac_bits + x.fmt.frac_bits
    acc = x.data @ weight.data.T
    acc = convert_raw(acc, prod_frac, acc_fmt)
    b = convert_raw(bias.data, bias.fmt, acc_fmt)
    acc, _ = saturate_raw(acc + b, acc_fmt)
    return QTensor(shift_round(acc, acc_fmt.frac_bits - out_fmt.frac_bits), out_fmt)


__all__ = [
    "QTensor", "BinTensor", "ShapeMismatch", "binary_conv1d", "conv_sums",
    "sign_activation", "channel_shuffle", "maxpool1d", "global_avg_pool",
    "fully_connected", "xnor_popcount_dot", "pack_pm1", "WEIGHT_FMT",
]
