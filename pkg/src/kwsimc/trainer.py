"""On-chip customization of the classifier layer in fixed point.

Features captured after global average pooling are replayed from a small
buffer. Each epoch computes a LUT softmax, the cross-entropy error, an
optional error scaling, per-sample gradients, small-gradient accumulation
(SGA), optional random gradient prediction (RGP) and a shift-based update.
Everything inside :func:`customize` is integer mantissa arithmetic.

Gradient bookkeeping (per weight, accumulator format Q(1,7,8)):

* per-sample gradient ``g = quantize(e * x)`` into Q(1,0,7)
* epoch gradient ``G = sum_i g_i``; |g| <= 1 and the buffer holds at most
  90 samples, so the sum never reaches the accumulator limit
* update ``dW = round_half_away(G_update * 2**-lr_exponent)`` in weight LSBs
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .fixedpoint import (
    ACC_FMT,
    ACT_FMT,
    ERROR_FMT,
    GRAD_FMT,
    WEIGHT_FMT,
    RoundMode,
    convert_raw,
    divide_raw,
    exp_lut_raw,
    quantize_raw,
    round_div,
    saturate_raw,
    shift_round,
)
from .model.arch import ConfigError, ModelSpec
from .tensorcore import QTensor, ShapeMismatch, fully_connected

BUFFER_CAPACITY = 90
LR_EXP_START = 4
LR_EXP_MAX = 7
LR_STEP_EPOCHS = 10
# software reference scale factor for a batch-averaged error
SOFTWARE_SCALE = 128


class BufferEmpty(ValueError):
    pass


class BufferFull(ValueError):
    pass


class AllZeroError(ValueError):
    """Every error component is zero after scaling; the sample carries no update."""


class ErrorScaling(str, enum.Enum):
    NONE = "none"          # batch-averaged error, quantized as is
    SOFTWARE = "software"  # batch-averaged error times 2**s, s from the extreme value
    HARDWARE = "hardware"  # per-sample error times 1.375 (x + x>>2 + x>>3)


class RgpPosition(str, enum.Enum):
    AFTER_SGA = "after"
    BEFORE_SGA = "before"


@dataclass
class FeatureBuffer:
    """Post-GAP features (activation format) and labels of the personal set."""

    features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    capacity: int = BUFFER_CAPACITY
    fmt = ACT_FMT

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) > self.capacity:
            raise BufferFull(f"{len(self.labels)} samples exceed capacity {self.capacity}")
        if self.features.shape[0] != len(self.labels):
            raise ShapeMismatch("features and labels disagree in length")

    def __len__(self) -> int:
        return len(self.labels)

    def add(self, feats: QTensor, labels) -> None:
        if feats.fmt != ACT_FMT:
            raise ShapeMismatch(f"buffer stores {ACT_FMT}, got {feats.fmt}")
        data = np.atleast_2d(feats.data)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if len(self) + len(labels) > self.capacity:
            raise BufferFull(f"adding {len(labels)} samples exceeds capacity {self.capacity}")
        self.features = data if len(self) == 0 else np.concatenate([self.features, data])
        self.labels = np.concatenate([self.labels, labels])

    def qtensor(self) -> QTensor:
        return QTensor(self.features, ACT_FMT)


@dataclass
class TrainerState:
    """Classifier weights and the per-weight SGA accumulators."""

    W: np.ndarray                 # Q(1,0,7) mantissas (classes, features)
    b: np.ndarray                 # Q(1,3,4) mantissas (classes,)
    G_accu: np.ndarray            # Q(1,7,8) mantissas
    gradient_mem: np.ndarray      # last epoch's summed gradient, Q(1,7,8)
    lr_exponent: int = LR_EXP_START
    epoch: int = 0

    @classmethod
    def from_model(cls, model: ModelSpec) -> "TrainerState":
        if model.fc_weight.fmt != WEIGHT_FMT or model.fc_bias.fmt != ACT_FMT:
            raise ShapeMismatch("classifier must be in weight/activation formats")
        w = model.fc_weight.data.astype(np.int64).copy()
        return cls(W=w, b=model.fc_bias.data.astype(np.int64).copy(),
                   G_accu=np.zeros_like(w), gradient_mem=np.zeros_like(w))

    @classmethod
    def from_real(cls, weight, bias) -> "TrainerState":
        w, _ = quantize_raw(weight, WEIGHT_FMT)
        b, _ = quantize_raw(bias, ACT_FMT)
        return cls(W=w, b=b, G_accu=np.zeros_like(w), gradient_mem=np.zeros_like(w))

    def copy(self) -> "TrainerState":
        return TrainerState(self.W.copy(), self.b.copy(), self.G_accu.copy(),
                            self.gradient_mem.copy(), self.lr_exponent, self.epoch)

    def weight(self) -> QTensor:
        return QTensor(self.W, WEIGHT_FMT)

    def bias(self) -> QTensor:
        return QTensor(self.b, ACT_FMT)

    def apply_to(self, model: ModelSpec) -> ModelSpec:
        out = model.copy()
        out.fc_weight = self.weight()
        out.fc_bias = self.bias()
        return out


# -- error ----------------------------------------------------------------------

def softmax_raw(scores_raw: np.ndarray) -> np.ndarray:
    """LUT softmax of activation-format scores (..., C) -> Q(1,0,7), truncated."""
    e = exp_lut_raw(scores_raw, ACT_FMT)
    total = e.sum(axis=-1, keepdims=True)
    return divide_raw(e, total, ERROR_FMT.frac_bits, ERROR_FMT)


def errors_raw(scores_raw: np.ndarray, labels) -> np.ndarray:
    """softmax - onehot for a batch, in Q(1,0,7) mantissas."""
    p = softmax_raw(scores_raw)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, np.asarray(labels, dtype=np.int64).reshape(-1, 1), 1 << ERROR_FMT.frac_bits,
                      axis=-1)
    return saturate_raw(p - onehot, ERROR_FMT)[0]


def error_from_loss(scores: QTensor, label: int) -> QTensor:
    """Cross-entropy error of one score vector."""
    if scores.fmt != ACT_FMT:
        raise ShapeMismatch(f"scores must be {ACT_FMT}, got {scores.fmt}")
    data = np.asarray(scores.data)
    if data.ndim != 1:
        raise ShapeMismatch("error_from_loss takes a single score vector")
    return QTensor(errors_raw(data[None], [label])[0], ERROR_FMT)


# -- error scaling --------------------------------------------------------------

def _fraction(x) -> Fraction:
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


def scaling_exponent(max_abs) -> int:
    """``ceil(log2(1 / max_abs))`` computed exactly, i.e. the smallest s with max_abs * 2**s >= 1."""
    m = _fraction(max_abs)
    if m <= 0:
        raise AllZeroError("error is zero everywhere")
    s = 0
    while m * Fraction(2) ** s < 1:
        s += 1
    while m * Fraction(2) ** (s - 1) >= 1:
        s -= 1
    return s


def hardware_scale_raw(e: np.ndarray) -> np.ndarray:
    """x * 1.375 as x + x>>2 + x>>3 on the magnitude, sign restored, saturated."""
    e = np.asarray(e, dtype=np.int64)
    mag = np.abs(e)
    out = np.sign(e) * (mag + (mag >> 2) + (mag >> 3))
    return saturate_raw(out, ERROR_FMT)[0]


def _saturate_symmetric(raw: np.ndarray, fmt=ERROR_FMT) -> np.ndarray:
    # the most negative code is dropped so scaling keeps the ordering of |error|
    return np.clip(raw, -fmt.raw_max, fmt.raw_max)


def batch_scaled_errors(e: np.ndarray, mode: ErrorScaling, batch: int) -> tuple[np.ndarray, int]:
    """Per-sample errors (B, C) -> the error that multiplies the features.

    ``NONE`` and ``SOFTWARE`` reproduce a batch-averaged framework: the
    error is divided by ``batch`` (and multiplied by ``2**s``) before
    quantization. ``HARDWARE`` scales each sample by 1.375 instead, which is
    the hardware equivalent of the software factor 128 at batch 90.
    Returns ``(scaled, s)``; ``s`` is 0 outside software mode.
    """
    e = np.asarray(e, dtype=np.int64)
    mode = ErrorScaling(mode)
    if mode is ErrorScaling.HARDWARE:
        return hardware_scale_raw(e), 0
    s = 0
    if mode is ErrorScaling.SOFTWARE:
        peak = int(np.abs(e).max()) if e.size else 0
        if peak == 0:
            raise AllZeroError("all errors are zero")
        s = scaling_exponent(Fraction(peak, batch << ERROR_FMT.frac_bits))
    scaled = round_div(e << s, np.int64(batch), RoundMode.NEAREST_EVEN)
    if mode is ErrorScaling.SOFTWARE:
        return _saturate_symmetric(scaled), s
    return saturate_raw(scaled, ERROR_FMT)[0], s


def scale_error(error: QTensor, mode: ErrorScaling | str = ErrorScaling.SOFTWARE) -> QTensor:
    """Scale one error vector so it fills the 8-bit error format.

    Software mode multiplies by ``2**s`` with ``s = ceil(log2(1/max|e|))``;
    hardware mode multiplies by 1.375 through shifts and adds.
    """
    mode = ErrorScaling(mode)
    data = np.asarray(error.data, dtype=np.int64)
    if mode is ErrorScaling.NONE:
        out = data
    elif mode is ErrorScaling.HARDWARE:
        out = hardware_scale_raw(data)
    else:
        peak = int(np.abs(data).max()) if data.size else 0
        if peak == 0:
            raise AllZeroError("all errors are zero")
        s = scaling_exponent(Fraction(peak, 1 << error.fmt.frac_bits))
        out = _saturate_symmetric(data << s, error.fmt)
    if not np.any(out):
        raise AllZeroError("all errors quantize to zero after scaling")
    return QTensor(out, error.fmt)


# -- gradients ------------------------------------------------------------------

def sample_gradients(errors: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Per-sample outer products quantized to Q(1,0,7): (B, C) x (B, N) -> (B, C, N)."""
    prod = errors[:, :, None] * feats[:, None, :]
    return convert_raw(prod, ERROR_FMT.frac_bits + ACT_FMT.frac_bits, GRAD_FMT)


def epoch_gradient(errors: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Sum of per-sample gradients in the accumulator format."""
    g = sample_gradients(errors, feats)
    total = g.sum(axis=0) << (ACC_FMT.frac_bits - GRAD_FMT.frac_bits)
    return saturate_raw(total, ACC_FMT)[0]


# -- SGA ------------------------------------------------------------------------

def g_threshold(lr, min_weight=Fraction(1, 128)) -> Fraction:
    """G_th = (min_weight / 2) / LR, exact."""
    lr = _fraction(lr)
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    return _fraction(min_weight) / 2 / lr


def g_threshold_raw(lr_exponent: int, fmt=ACC_FMT) -> int:
    """G_th for LR = 2**-lr_exponent and one weight LSB, as a mantissa of ``fmt``."""
    th = g_threshold(Fraction(1, 1 << lr_exponent), Fraction(1, 1 << WEIGHT_FMT.frac_bits))
    raw = th * (1 << fmt.frac_bits)
    if raw.denominator != 1:
        raise ConfigError(f"G_th {th} is not representable in {fmt}")
    return int(raw)


def sga_step(G, G_accu, G_th):
    """One step of small gradient accumulation on magnitudes.

    Returns ``(G_update or None, new_G_accu)``. Works on any numeric type
    that supports ``abs``, ``<`` and ``+`` (ints for mantissas, Fractions
    for exact values).
    """
    if abs(G) < G_th:
        if abs(G_accu) < G_th:
            return None, G_accu + G
        return G_accu + G, G_accu * 0
    return G, G_accu


def sga_vec(G: np.ndarray, G_accu: np.ndarray, G_th: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Elementwise :func:`sga_step` on mantissas: ``(G_update, emitted, new_accu)``.

    ``G_update`` is 0 where nothing was emitted.
    """
    small = np.abs(G) < G_th
    hold = small & (np.abs(G_accu) < G_th)
    flush = small & ~hold
    update = np.where(flush, G_accu + G, np.where(small, 0, G))
    accu = np.where(hold, G_accu + G, np.where(flush, 0, G_accu))
    return saturate_raw(update, ACC_FMT)[0], ~hold, saturate_raw(accu, ACC_FMT)[0]


# -- RGP ------------------------------------------------------------------------

def rgp_noise_raw(shape, lam: float, rng: np.random.Generator) -> np.ndarray:
    """quantize(N(0,1) / lambda) in the gradient format."""
    if not lam >= 1:
        raise ConfigError(f"RGP lambda must be >= 1, got {lam}")
    return quantize_raw(rng.standard_normal(shape) / lam, GRAD_FMT)[0]


def rgp(G: QTensor, lam: float, rng: np.random.Generator) -> QTensor:
    """G' = G + quantize(rand / lambda), saturated in G's format."""
    noise = rgp_noise_raw(np.shape(G.data), lam, rng)
    noise = convert_raw(noise, GRAD_FMT, G.fmt)
    return QTensor(saturate_raw(np.asarray(G.data) + noise, G.fmt)[0], G.fmt)


# -- schedule and update --------------------------------------------------------

def lr_exponent_for(epoch: int, start: int = LR_EXP_START, cap: int = LR_EXP_MAX,
                    step: int = LR_STEP_EPOCHS) -> int:
    """LR = 2**-e, halved every ``step`` epochs, floored at 2**-cap."""
    return min(start + epoch // step, cap)


def weight_delta(G_update: np.ndarray, lr_exponent: int) -> np.ndarray:
    """LR * G in weight LSBs; ties round away so G = G_th moves one LSB."""
    shift = lr_exponent + ACC_FMT.frac_bits - WEIGHT_FMT.frac_bits
    return shift_round(np.asarray(G_update, dtype=np.int64), shift, RoundMode.NEAREST_AWAY)


# -- customization loop ---------------------------------------------------------

@dataclass(frozen=True)
class TrainerConfig:
    error_scaling: ErrorScaling = ErrorScaling.HARDWARE
    sga: bool = True
    rgp: bool = True
    rgp_lambda: float = 8.0
    rgp_position: RgpPosition = RgpPosition.AFTER_SGA
    batch_size: int = BUFFER_CAPACITY
    lr_exp_start: int = LR_EXP_START
    lr_exp_max: int = LR_EXP_MAX
    lr_step: int = LR_STEP_EPOCHS
    seed: int = 0
    # compare argmax decisions with and without the RGP term at every step
    audit_rgp: bool = False

    def __post_init__(self):
        object.__setattr__(self, "error_scaling", ErrorScaling(self.error_scaling))
        object.__setattr__(self, "rgp_position", RgpPosition(self.rgp_position))
        if self.rgp and not self.rgp_lambda >= 1:
            raise ConfigError("rgp_lambda must be >= 1")
        if self.batch_size < 1 or not 0 <= self.lr_exp_start <= self.lr_exp_max:
            raise ConfigError(f"invalid trainer config {self}")

    @classmethod
    def naive(cls, **kw) -> "TrainerConfig":
        return cls(error_scaling=ErrorScaling.NONE, sga=False, rgp=False, **kw)

    def to_dict(self) -> dict:
        return {"error_scaling": self.error_scaling.value, "sga": self.sga, "rgp": self.rgp,
                "rgp_lambda": self.rgp_lambda, "rgp_position": self.rgp_position.value,
                "batch_size": self.batch_size, "lr_exp_start": self.lr_exp_start,
                "lr_exp_max": self.lr_exp_max, "lr_step": self.lr_step, "seed": self.seed}


TRACE_FIELDS = ("epoch", "lr_exponent", "loss_proxy", "train_correct", "train_total",
                "test_correct", "test_total", "nonzero_updates", "rgp_same", "rgp_total")


def _scores(W, b, feats) -> np.ndarray:
    return fully_connected(QTensor(feats, ACT_FMT), QTensor(W, WEIGHT_FMT), QTensor(b, ACT_FMT)).data


def _correct(W, b, feats, labels) -> int:
    if len(labels) == 0:
        return 0
    return int(np.sum(np.argmax(_scores(W, b, feats), axis=-1) == labels))


def customize(state: TrainerState, buffer: FeatureBuffer, epochs: int = 1000,
              config: TrainerConfig = TrainerConfig(),
              test: FeatureBuffer | None = None) -> tuple[TrainerState, list[dict]]:
    """Fine-tune the classifier on the buffer; returns the new state and a trace.

    Trace records hold integer counts only (correct/total), one per epoch,
    measured after that epoch's update.
    """
    if len(buffer) == 0:
        raise BufferEmpty("feature buffer is empty")
    if buffer.features.shape[1] != state.W.shape[1]:
        raise ShapeMismatch(f"buffer has {buffer.features.shape[1]} features, "
                            f"classifier expects {state.W.shape[1]}")
    st = state.copy()
    feats, labels = buffer.features, buffer.labels
    test_feats = test.features if test is not None else np.zeros((0, feats.shape[1]), dtype=np.int64)
    test_labels = test.labels if test is not None else np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng([config.seed, 0x524750])
    trace = []
    for _ in range(epochs):
        st.lr_exponent = lr_exponent_for(st.epoch, config.lr_exp_start, config.lr_exp_max, config.lr_step)
        g_th = g_threshold_raw(st.lr_exponent)
        err = errors_raw(_scores(st.W, st.b, feats), labels)
        loss_proxy = int(-err[np.arange(len(labels)), labels].sum())
        try:
            scaled, _ = batch_scaled_errors(err, config.error_scaling, config.batch_size)
            G = epoch_gradient(scaled, feats)
        except AllZeroError:
            G = np.zeros_like(st.W)
        st.gradient_mem = G
        noise = None
        if config.rgp:
            noise = convert_raw(rgp_noise_raw(G.shape, config.rgp_lambda, rng), GRAD_FMT, ACC_FMT)
            if config.rgp_position is RgpPosition.BEFORE_SGA:
                G = saturate_raw(G + noise, ACC_FMT)[0]
        if config.sga:
            G_update, emitted, st.G_accu = sga_vec(G, st.G_accu, g_th)
        else:
            G_update, emitted = G, np.ones(G.shape, dtype=bool)
        plain_delta = weight_delta(G_update, st.lr_exponent)
        if noise is not None and config.rgp_position is RgpPosition.AFTER_SGA:
            G_update = np.where(emitted, saturate_raw(G_update + noise, ACC_FMT)[0], G_update)
        delta = weight_delta(G_update, st.lr_exponent)
        new_W = saturate_raw(st.W - delta, WEIGHT_FMT)[0]
        rgp_same = rgp_total = 0
        if config.audit_rgp and noise is not None and config.rgp_position is RgpPosition.AFTER_SGA:
            alt_W = saturate_raw(st.W - plain_delta, WEIGHT_FMT)[0]
            a = np.argmax(_scores(new_W, st.b, feats), axis=-1)
            b = np.argmax(_scores(alt_W, st.b, feats), axis=-1)
            rgp_same, rgp_total = int(np.sum(a == b)), len(a)
        st.W = new_W
        trace.append({
            "epoch": st.epoch, "lr_exponent": st.lr_exponent, "loss_proxy": loss_proxy,
            "train_correct": _correct(st.W, st.b, feats, labels), "train_total": len(labels),
            "test_correct": _correct(st.W, st.b, test_feats, test_labels), "test_total": len(test_labels),
            "nonzero_updates": int(np.count_nonzero(delta)), "rgp_same": rgp_same, "rgp_total": rgp_total,
        })
        st.epoch += 1
    return st, trace


# -- float reference ------------------------------------------------------------

def float_finetune(weight: np.ndarray, bias: np.ndarray, feats: np.ndarray, labels,
                   epochs: int = 1000, batch_size: int = BUFFER_CAPACITY,
                   lr_exp_start: int = LR_EXP_START, lr_exp_max: int = LR_EXP_MAX,
                   lr_step: int = LR_STEP_EPOCHS) -> np.ndarray:
    """Full-precision SGD on the same schedule and gradient scale.

    ``feats`` are real feature values; returns the fine-tuned real weights.
    The gradient carries the same factor 128 as the software-scaled error so
    the power-of-two learning rates mean the same thing in both paths.
    """
    w = np.asarray(weight, dtype=np.float64).copy()
    bias = np.asarray(bias, dtype=np.float64)
    x = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    onehot = np.eye(w.shape[0])[labels]
    for epoch in range(epochs):
        lr = 2.0 ** -lr_exponent_for(epoch, lr_exp_start, lr_exp_max, lr_step)
        z = x @ w.T + bias
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        grad = (SOFTWARE_SCALE / batch_size) * (p - onehot).T @ x
        w -= lr * grad
    return w


def float_predict(weight, bias, feats) -> np.ndarray:
    return np.argmax(np.asarray(feats) @ np.asarray(weight).T + np.asarray(bias), axis=-1)


def trace_accuracy(rec: dict, split: str = "test") -> float:
    total = rec[f"{split}_total"]
    return rec[f"{split}_correct"] / total if total else float("nan")
