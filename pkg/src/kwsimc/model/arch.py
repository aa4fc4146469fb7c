"""Architecture description, sinc filter construction and BN folding."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..fixedpoint import ACT_FMT, WEIGHT_FMT
from ..tensorcore import QTensor

GROUP_SIZE = 24
KEYWORDS = ("yes", "no", "up", "down", "left", "right", "stop", "go", "on", "off")

# below this the 15-tap binarized kernel loses its negative lobes
MIN_LOW_HZ = 600.0
MIN_BAND_HZ = 50.0


class InvalidCutoffs(ValueError):
    pass


class DegenerateBN(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlockArch:
    out_channels: int
    kernel: int = 3
    pool: int = 1


@dataclass(frozen=True)
class ArchConfig:
    """Layer dimensions. Every field can be overridden from the config file.

    The paper preset is a reconstruction: the exact per-layer numbers of the
    published network are not recoverable, so these were picked to land near
    125K parameters with the same pooling ladder (full, full, 1/2, 1/4, 1/4,
    1/8 of the input length across the six layers).
    """

    sample_rate: int = 16000
    num_samples: int = 16000
    sinc_filters: int = 24
    sinc_kernel: int = 15
    sinc_pool: int = 1
    blocks: tuple[BlockArch, ...] = (
        BlockArch(48, 9, 2),
        BlockArch(96, 9, 2),
        BlockArch(96, 9, 1),
        BlockArch(144, 9, 2),
        BlockArch(192, 9, 1),
    )
    group_size: int = GROUP_SIZE
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockArch) else BlockArch(**b) for b in self.blocks))
        if self.sinc_kernel % 2 == 0:
            raise ConfigError("sinc kernel size must be odd")
        in_ch = self.sinc_filters
        length = self.num_samples
        if length % self.sinc_pool:
            raise ConfigError(f"input length {length} not divisible by sinc pool {self.sinc_pool}")
        length //= self.sinc_pool
        for i, b in enumerate(self.blocks):
            if in_ch % self.group_size:
                raise ConfigError(f"block {i}: {in_ch} input channels not a multiple of {self.group_size}")
            groups = in_ch // self.group_size
            if b.out_channels % groups:
                raise ConfigError(f"block {i}: {b.out_channels} outputs not divisible by {groups} groups")
            if length % b.pool:
                raise ConfigError(f"block {i}: length {length} not divisible by pool {b.pool}")
            length //= b.pool
            in_ch = b.out_channels

    def groups(self, i: int) -> int:
        in_ch = self.sinc_filters if i == 0 else self.blocks[i - 1].out_channels
        return in_ch // self.group_size

    def in_channels(self, i: int) -> int:
        return self.sinc_filters if i == 0 else self.blocks[i - 1].out_channels

    def fan_in(self, i: int) -> int:
        return self.group_size * self.blocks[i].kernel

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.sinc_filters

    def lengths(self) -> list[int]:
        """Input length of each layer (sinc first)."""
        out = [self.num_samples]
        length = self.num_samples // self.sinc_pool
        for b in self.blocks:
            out.append(length)
            length //= b.pool
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(BlockArch(**b) if isinstance(b, dict) else BlockArch(*b)
                                for b in d["blocks"])
        return cls(**d)


PAPER_ARCH = ArchConfig()

# small enough to train on a laptop CPU in under a minute
DESK_ARCH = ArchConfig(
    sinc_pool=8,
    blocks=(
        BlockArch(48, 3, 2),
        BlockArch(48, 3, 2),
        BlockArch(48, 3, 1),
        BlockArch(96, 3, 2),
        BlockArch(96, 3, 1),
    ),
)

PRESETS = {"paper": PAPER_ARCH, "desk": DESK_ARCH}


def count_parameters(arch: ArchConfig) -> int:
    """Learned scalars: sinc cutoffs, binary weights, folded biases, classifier."""
    total = 2 * arch.sinc_filters + arch.sinc_filters
    for i, b in enumerate(arch.blocks):
        total += b.out_channels * arch.fan_in(i) + b.out_channels
    total += arch.num_classes * arch.feature_dim + arch.num_classes
    return total


def model_size_bits(arch: ArchConfig) -> int:
    """Storage with 1-bit weights, 8-bit biases and an 8-bit classifier."""
    bits = arch.sinc_filters * arch.sinc_kernel + 8 * arch.sinc_filters
    for i, b in enumerate(arch.blocks):
        bits += b.out_channels * arch.fan_in(i) + 8 * b.out_channels
    bits += 8 * (arch.num_classes * arch.feature_dim + arch.num_classes)
    return bits


# -- sinc front end -----------------------------------------------------------

def mel_cutoffs(n: int, sample_rate: int, low: float = MIN_LOW_HZ, high: float | None = None):
    """Initial (low_hz, band_hz) pairs evenly spaced on the mel scale."""
    high = high if high is not None else sample_rate / 2 - 100.0
    to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    from_mel = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)
    edges = from_mel(np.linspace(to_mel(low), to_mel(high), n + 1))
    return edges[:-1].copy(), np.diff(edges)


def sinc_kernels(low_hz, band_hz, kernel_size: int, sample_rate: int) -> np.ndarray:
    """Hamming-windowed band-pass kernels, one row per filter (float)."""
    low = np.asarray(low_hz, dtype=np.float64)[:, None]
    high = low + np.asarray(band_hz, dtype=np.float64)[:, None]
    t = (np.arange(kernel_size) - (kernel_size - 1) / 2) / sample_rate
    g = 2 * high * np.sinc(2 * high * t) - 2 * low * np.sinc(2 * low * t)
    return g * np.hamming(kernel_size) / sample_rate


def binarize(x) -> np.ndarray:
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


@dataclass
class SincLayerSpec:
    """Binarized sinc filter bank plus its folded BN bias and polarity."""

    low_hz: np.ndarray
    band_hz: np.ndarray
    kernel_size: int = 15
    sample_rate: int = 16000
    pool: int = 1
    bias: np.ndarray | None = None
    polarity: np.ndarray | None = None
    weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.low_hz = np.asarray(self.low_hz, dtype=np.float64)
        self.band_hz = np.asarray(self.band_hz, dtype=np.float64)
        n = self.low_hz.shape[0]
        if self.band_hz.shape != (n,):
            raise InvalidCutoffs("low_hz and band_hz must have the same length")
        if self.kernel_size % 2 == 0:
            raise InvalidCutoffs("kernel size must be odd")
        nyquist = self.sample_rate / 2
        bad = (self.low_hz <= 0) | (self.band_hz <= 0) | (self.low_hz + self.band_hz > nyquist)
        if np.any(bad):
            raise InvalidCutoffs(f"filters {np.flatnonzero(bad).tolist()} violate 0 < low < high <= {nyquist}")
        self.weight = binarize(sinc_kernels(self.low_hz, self.band_hz, self.kernel_size, self.sample_rate))
        one_sided = np.all(self.weight == 1, axis=1) | np.all(self.weight == -1, axis=1)
        if np.any(one_sided):
            raise InvalidCutoffs(
                f"filters {np.flatnonzero(one_sided).tolist()} binarize to a constant kernel")
        self.bias = np.zeros(n, np.int64) if self.bias is None else np.asarray(self.bias, np.int64)
        self.polarity = np.ones(n, np.int8) if self.polarity is None else np.asarray(self.polarity, np.int8)

    @property
    def num_filters(self) -> int:
        return self.low_hz.shape[0]


@dataclass
class ConvBlockSpec:
    """Binary group conv block with folded in-memory BN.

    ``bias`` is what the array stores; ``raw_bias`` is the unconstrained
    folded value it was derived from (kept so a different mapping method
    can be re-applied later). ``act_offset`` is informational: the trained
    binarization offset is already inside the bias.
    """

    weight: np.ndarray
    bias: np.ndarray
    groups: int
    pool: int = 1
    polarity: np.ndarray | None = None
    raw_bias: np.ndarray | None = None
    act_offset: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.int8)
        if not np.all(np.abs(self.weight) == 1):
            raise ValueError("block weights must be +-1")
        out_ch = self.weight.shape[0]
        self.bias = np.asarray(self.bias, dtype=np.int64)
        if self.polarity is None:
            self.polarity = np.ones(out_ch, np.int8)
        self.polarity = np.asarray(self.polarity, dtype=np.int8)
        self.raw_bias = self.bias.copy() if self.raw_bias is None else np.asarray(self.raw_bias, np.int64)
        if self.act_offset is None:
            self.act_offset = np.zeros(out_ch, np.float64)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1] * self.weight.shape[2]


@dataclass
class ModelSpec:
    arch: ArchConfig
    sinc: SincLayerSpec
    blocks: list[ConvBlockSpec]
    fc_weight: QTensor
    fc_bias: QTensor
    mapping: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fc_weight.fmt != WEIGHT_FMT or self.fc_bias.fmt != ACT_FMT:
            raise ValueError("classifier must be weight Q(1,0,7) and bias Q(1,3,4)")

    @property
    def num_classes(self) -> int:
        return self.fc_weight.shape[0]

    def params(self) -> int:
        return count_parameters(self.arch)

    def copy(self) -> "ModelSpec":
        return copy.deepcopy(self)


# -- BN folding ---------------------------------------------------------------

def bn_preactivation(x, gamma, beta, mu, sigma, offset=0.0):
    """Float BN followed by the binarization offset; the sign of this is the activation."""
    return gamma * (np.asarray(x, dtype=np.float64) - mu) / sigma + beta + offset


def fold_bn(gamma, beta, mu, sigma, act_offset=0.0):
    """Fold BN + offset into an integer bias and a polarity per channel.

    For integer pre-activation ``x``:
    ``sign(gamma*(x-mu)/sigma + beta + offset) == polarity * sign(x + bias)``
    with ties mapping to +1 on both sides. ``gamma == 0`` gives a constant
    output, encoded as a bias far outside any reachable sum.
    """
    gamma, beta, mu, sigma, act_offset = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (gamma, beta, mu, sigma, act_offset)))
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise DegenerateBN("BN sigma must be positive")
    n = gamma.shape[0]
    bias = np.empty(n, dtype=np.int64)
    polarity = np.ones(n, dtype=np.int8)
    big = 1 << 20
    for c in range(n):
        g, b, m, s, o = gamma[c], beta[c], mu[c], sigma[c], act_offset[c]
        f = lambda x: bn_preactivation(x, g, b, m, s, o) >= 0
        if g == 0:
            bias[c] = big if (b + o) >= 0 else -big
            continue
        t_real = m - (b + o) * s / g
        if not math.isfinite(t_real) or abs(t_real) > big:
            bias[c] = (big if f(0) else -big) * (1 if g > 0 else -1)
            polarity[c] = 1 if g > 0 else -1
            continue
        if g > 0:
            # smallest integer t with f(t) true; f is nondecreasing in x
            t = math.ceil(t_real)
            while f(t - 1):
                t -= 1
            while not f(t):
                t += 1
            bias[c] = -t
        else:
            # largest integer u with f(u) true; output +1 iff x <= u
            u = math.floor(t_real)
            while f(u + 1):
                u += 1
            while not f(u):
                u -= 1
            bias[c] = -(u + 1)
            polarity[c] = -1
    return bias, polarity
