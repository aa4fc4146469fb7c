"""Offline (server-side) training in float with straight-through estimators.

This is the pre-deployment phase that produces checkpoints; the exported
network is then run bit-accurately by :mod:`kwsimc.model.network`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..fixedpoint import ACT_FMT, WEIGHT_FMT
from ..imcsim import BiasMapping, MappingMethod, map_bias_values
from ..tensorcore import QTensor, shuffle_permutation
from .arch import (
    MIN_BAND_HZ,
    MIN_LOW_HZ,
    ArchConfig,
    ConfigError,
    ConvBlockSpec,
    ModelSpec,
    SincLayerSpec,
    fold_bn,
    mel_cutoffs,
)

log = logging.getLogger(__name__)


class SignSTE(torch.autograd.Function):
    """sign with ties to +1; gradient passes where |x| <= 1."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * (x.abs() <= 1).to(grad.dtype)


class RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, step):
        return torch.round(x / step) * step

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def ste_sign(x):
    return SignSTE.apply(x)


def _pad(x, kernel, value):
    left = (kernel - 1) // 2
    return F.pad(x, (left, kernel - 1 - left), value=value)


def _shuffle(x, groups):
    if groups == 1:
        return x
    perm = shuffle_permutation(x.shape[1], groups)
    return x[:, np.argsort(perm)]


class SincBinary(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        low, band = mel_cutoffs(arch.sinc_filters, arch.sample_rate)
        self.low_hz = nn.Parameter(torch.tensor(low, dtype=torch.float64))
        self.band_hz = nn.Parameter(torch.tensor(band, dtype=torch.float64))
        self.kernel = arch.sinc_kernel
        self.rate = arch.sample_rate
        t = (torch.arange(self.kernel, dtype=torch.float64) - (self.kernel - 1) / 2) / self.rate
        self.register_buffer("t", t)
        self.register_buffer("window", torch.tensor(np.hamming(self.kernel)))

    def cutoffs(self):
        nyq = self.rate / 2
        low = self.low_hz.clamp(MIN_LOW_HZ, nyq - MIN_BAND_HZ)
        high = (low + self.band_hz.abs().clamp(min=MIN_BAND_HZ)).clamp(max=nyq)
        return low, high

    def real_kernels(self):
        low, high = self.cutoffs()
        lo, hi = low[:, None], high[:, None]
        g = 2 * hi * torch.sinc(2 * hi * self.t) - 2 * lo * torch.sinc(2 * lo * self.t)
        return g * self.window / self.rate

    def forward(self, audio_raw):
        w = ste_sign(self.real_kernels()).float()
        x = _pad(audio_raw[:, None, :], self.kernel, 0.0)
        return F.conv1d(x, w[:, None, :])


class BinaryBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, groups, pool):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch // groups, kernel).uniform_(-0.5, 0.5))
        self.bn = nn.BatchNorm1d(out_ch)
        self.offset = nn.Parameter(torch.zeros(out_ch))
        self.kernel, self.groups, self.pool = kernel, groups, pool

    def preact(self, x):
        return F.conv1d(_pad(x, self.kernel, -1.0), ste_sign(self.weight), groups=self.groups)

    def forward(self, x):
        y = ste_sign(self.bn(self.preact(x)) + self.offset[:, None])
        if self.pool > 1:
            y = F.max_pool1d(y, self.pool)
        return _shuffle(y, self.groups)


class KwsNet(nn.Module):
    """Float training twin of the integer network."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.sinc = SincBinary(arch)
        self.sinc_bn = nn.BatchNorm1d(arch.sinc_filters)
        self.sinc_offset = nn.Parameter(torch.zeros(arch.sinc_filters))
        blocks = []
        for i, b in enumerate(arch.blocks):
            blocks.append(BinaryBlock(arch.in_channels(i), b.out_channels, b.kernel, arch.groups(i), b.pool))
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(arch.feature_dim, arch.num_classes)
        nn.init.uniform_(self.fc.weight, -0.1, 0.1)
        nn.init.zeros_(self.fc.bias)

    def features(self, audio_raw):
        x = ste_sign(self.sinc_bn(self.sinc(audio_raw)) + self.sinc_offset[:, None])
        if self.arch.sinc_pool > 1:
            x = F.max_pool1d(x, self.arch.sinc_pool)
        for blk in self.blocks:
            x = blk(x)
        return RoundSTE.apply(x.mean(dim=-1), ACT_FMT.resolution)

    def forward(self, audio_raw):
        return self.fc(self.features(audio_raw))

    @torch.no_grad()
    def clip_(self):
        for blk in self.blocks:
            blk.weight.clamp_(-1.0, 1.0)
        self.fc.weight.clamp_(WEIGHT_FMT.min_value, WEIGHT_FMT.max_value)
        self.fc.bias.clamp_(ACT_FMT.min_value, ACT_FMT.max_value)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    lr_min: float = 1e-9
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError(f"invalid training config {self}")


@dataclass
class TrainResult:
    model: ModelSpec
    net: KwsNet
    history: list[dict] = field(default_factory=list)


def _bn_stats(bn: nn.BatchNorm1d):
    mu = bn.running_mean.double().numpy()
    sigma = torch.sqrt(bn.running_var.double() + bn.eps).numpy()
    return bn.weight.detach().double().numpy(), bn.bias.detach().double().numpy(), mu, sigma


def export(net: KwsNet, mapping: MappingMethod = MappingMethod.ADD, meta: dict | None = None) -> ModelSpec:
    """Fold BN and offsets into integer biases and quantize the classifier."""
    arch = net.arch
    low, high = (t.detach().numpy() for t in net.sinc.cutoffs())
    gamma, beta, mu, sigma = _bn_stats(net.sinc_bn)
    sbias, spol = fold_bn(gamma, beta, mu, sigma, net.sinc_offset.detach().double().numpy())
    sinc = SincLayerSpec(low_hz=low, band_hz=high - low, kernel_size=arch.sinc_kernel,
                         sample_rate=arch.sample_rate, pool=arch.sinc_pool, bias=sbias, polarity=spol)
    blocks = []
    for i, blk in enumerate(net.blocks):
        gamma, beta, mu, sigma = _bn_stats(blk.bn)
        offset = blk.offset.detach().double().numpy()
        raw, pol = fold_bn(gamma, beta, mu, sigma, offset)
        mapped, _ = map_bias_values(raw, BiasMapping(mapping))
        w = np.where(blk.weight.detach().numpy() >= 0, 1, -1).astype(np.int8)
        blocks.append(ConvBlockSpec(weight=w, bias=mapped, groups=blk.groups, pool=blk.pool,
                                    polarity=pol, raw_bias=raw, act_offset=offset))
    fc_w = QTensor.from_real(net.fc.weight.detach().double().numpy(), WEIGHT_FMT)
    fc_b = QTensor.from_real(net.fc.bias.detach().double().numpy(), ACT_FMT)
    return ModelSpec(arch=arch, sinc=sinc, blocks=blocks, fc_weight=fc_w, fc_bias=fc_b,
                     mapping=MappingMethod(mapping).value, meta=dict(meta or {}))


def shadow_state(net: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}


@torch.no_grad()
def float_accuracy(net: KwsNet, audio_raw: np.ndarray, labels, batch: int = 64) -> float:
    net.eval()
    correct = 0
    for s in range(0, len(labels), batch):
        x = torch.as_tensor(np.asarray(audio_raw[s:s + batch]), dtype=torch.float32)
        correct += int((net(x).argmax(-1).numpy() == np.asarray(labels[s:s + batch])).sum())
    return correct / max(len(labels), 1)


def train_offline(audio: np.ndarray, labels, arch: ArchConfig, cfg: TrainConfig = TrainConfig(),
                  augment_fn=None, quantize_fn=None) -> TrainResult:
    """Train from scratch and export a checkpoint.

    ``audio`` holds float clips in [-1, 1], shape (N, num_samples).
    ``augment_fn(clip, rng)`` and ``quantize_fn(clips) -> int8 mantissas``
    come from :mod:`kwsimc.dataio`.
    """
    if quantize_fn is None:
        raise ConfigError("quantize_fn is required")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("training set is empty")
    if labels.max() >= arch.num_classes:
        raise ConfigError(f"label {labels.max()} >= num_classes {arch.num_classes}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x7241])
    net = KwsNet(arch)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    steps_per_epoch = math.ceil(len(labels) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch,
                                                       eta_min=cfg.lr_min)
    clean = quantize_fn(audio)
    history = []
    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(len(labels))
        if cfg.augment and augment_fn is not None:
            batch_audio = quantize_fn(np.stack([augment_fn(a, rng) for a in audio]))
        else:
            batch_audio = clean
        total, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = torch.as_tensor(batch_audio[idx], dtype=torch.float32)
            y = torch.as_tensor(labels[idx], dtype=torch.long)
            logits = net(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            net.clip_()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(-1) == y).sum())
        rec = {"epoch": epoch, "loss": total / len(labels), "train_accuracy": correct / len(labels),
               "lr": opt.param_groups[0]["lr"]}
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["train_accuracy"])
    ideal = float_accuracy(net, clean, labels)
    model = export(net, meta={"ideal_train_accuracy": ideal, "epochs": cfg.epochs, "seed": cfg.seed})
    return TrainResult(model=model, net=net, history=history)
