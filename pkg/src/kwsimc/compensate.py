"""Bias compensation for IMC non-idealities, plus a noise-aware fine-tune.

The noisy and clean pre-activation sums of every binary block are compared
on the same input (the probe sees both for each layer of the noisy pass).
The per-channel mean difference is cancelled by moving the in-memory bias,
then an optional short fine-tune runs with the noise in the loop.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fixedpoint import ACT_FMT, WEIGHT_FMT
from .imcsim import BIAS_LIMIT, BiasMapping, MappingMethod, NoiseModel, map_bias_values
from .model.arch import ModelSpec
from .model.network import ImcBackend, accuracy, run_blocks, sinc_layer, unconstrained
from .model.training import RoundSTE, SignSTE, _pad, _shuffle
from .tensorcore import QTensor

log = logging.getLogger(__name__)

STATISTICS = ("mean",)


class CompensationError(ValueError):
    pass


@dataclass
class DiffStats:
    """Running per-channel moments of (noisy - clean) for one layer."""

    total: np.ndarray
    total_sq: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, channels: int) -> "DiffStats":
        return cls(np.zeros(channels), np.zeros(channels), 0)

    def add(self, diff: np.ndarray) -> None:
        """``diff`` is (N, C, L); reduces over samples and positions."""
        self.total += diff.sum(axis=(0, 2))
        self.total_sq += np.square(diff).sum(axis=(0, 2))
        self.count += diff.shape[0] * diff.shape[2]

    def merge(self, other: "DiffStats") -> "DiffStats":
        return DiffStats(self.total + other.total, self.total_sq + other.total_sq, self.count + other.count)

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.count if self.count else np.zeros_like(self.total)

    @property
    def variance(self) -> np.ndarray:
        if not self.count:
            return np.zeros_like(self.total)
        return np.maximum(self.total_sq / self.count - np.square(self.mean), 0.0)


def collect_difference_stats(model: ModelSpec, noise: NoiseModel, probe_audio, trials: int = 1,
                             mapping: MappingMethod | None = None) -> list[DiffStats]:
    """Per-layer, per-channel statistics of noisy minus clean pre-activation sums."""
    probe_audio = np.asarray(probe_audio, dtype=np.int64)
    if probe_audio.ndim != 2 or len(probe_audio) == 0:
        raise CompensationError("probe set must be a nonempty (N, samples) array")
    if trials < 1:
        raise CompensationError("trials must be >= 1")
    stats = [DiffStats.empty(b.out_channels) for b in model.blocks]

    def probe(i, clean, noisy):
        stats[i].add(np.asarray(noisy, dtype=np.float64) - clean)

    sinc_out = sinc_layer(probe_audio, model.sinc)
    ids = np.arange(len(probe_audio))
    for t in range(trials):
        backend = ImcBackend(noise=noise, mapping=mapping, trial=t)
        for s in range(0, len(ids), 16):
            rngs = [np.random.default_rng([noise.seed, t, int(k)]) for k in ids[s:s + 16]]
            run_blocks(model, sinc_out[s:s + 16], backend, rngs, probe)
    return stats


def derive_compensation(stats: list[DiffStats], statistic: str = "mean") -> list[np.ndarray]:
    """Integer bias delta per channel: ``-round(mean)``."""
    if statistic not in STATISTICS:
        raise CompensationError(f"unknown statistic {statistic!r}; choose from {STATISTICS}")
    out = []
    for st in stats:
        if st.count == 0:
            raise CompensationError("statistics are empty")
        out.append(-np.rint(st.mean).astype(np.int64))
    return out


@dataclass
class MergeReport:
    range_exceeded: list[np.ndarray]

    @property
    def any_exceeded(self) -> bool:
        return any(m.any() for m in self.range_exceeded)


def apply_compensation(model: ModelSpec, deltas: list[np.ndarray],
                       mapping: MappingMethod | None = None) -> tuple[ModelSpec, MergeReport]:
    """Merge deltas into the in-memory biases with the model's mapping method.

    Channels whose delta is zero keep their stored bias untouched.
    """
    if len(deltas) != len(model.blocks):
        raise CompensationError(f"{len(deltas)} deltas for {len(model.blocks)} blocks")
    out = model.copy()
    bm = BiasMapping(mapping or model.mapping or MappingMethod.ADD)
    exceeded = []
    for blk, delta in zip(out.blocks, deltas):
        delta = np.asarray(delta, dtype=np.int64)
        merged, clamped = map_bias_values(blk.bias + delta, bm)
        moved = delta != 0
        blk.bias = np.where(moved, merged, blk.bias)
        blk.raw_bias = np.where(moved, blk.raw_bias + delta, blk.raw_bias)
        flags = clamped & moved
        assert np.all(np.abs(blk.bias[moved]) <= BIAS_LIMIT)
        assert np.all((blk.bias[moved] - bm.width) % 2 == 0)
        exceeded.append(flags)
        if flags.any():
            log.warning("compensated bias clamped on channels %s", np.flatnonzero(flags).tolist())
    return out, MergeReport(exceeded)


# -- noise-aware fine-tune ------------------------------------------------------

class _FoldedBlock(nn.Module):
    def __init__(self, blk, offsets: np.ndarray, sa_sigma: float):
        super().__init__()
        self.latent = nn.Parameter(torch.as_tensor(blk.weight, dtype=torch.float32) * 0.5)
        self.bias = nn.Parameter(torch.as_tensor(blk.bias, dtype=torch.float32))
        self.register_buffer("polarity", torch.as_tensor(blk.polarity, dtype=torch.float32))
        self.register_buffer("offsets", torch.as_tensor(offsets, dtype=torch.float32))
        self.groups, self.pool, self.kernel = blk.groups, blk.pool, blk.kernel
        self.scale = float(np.sqrt(blk.fan_in))
        self.sa_sigma = sa_sigma

    def forward(self, x, gen):
        w = SignSTE.apply(self.latent)
        pre = F.conv1d(_pad(x, self.kernel, -1.0), w, groups=self.groups)
        pre = pre + self.bias[:, None] + self.offsets[:, None]
        if self.sa_sigma:
            pre = pre + self.sa_sigma * torch.randn(pre.shape, generator=gen)
        # the window of the straight-through gradient scales with the fan-in
        y = SignSTE.apply(pre / self.scale) * self.polarity[:, None]
        if self.pool > 1:
            y = F.max_pool1d(y, self.pool)
        return _shuffle(y, self.groups)


class FoldedNet(nn.Module):
    """Float twin of an exported model (BN already folded) with noise in the loop."""

    def __init__(self, model: ModelSpec, noise: NoiseModel):
        super().__init__()
        self.blocks = nn.ModuleList(
            _FoldedBlock(b, noise.static_offsets(i, b.out_channels), noise.sa_sigma)
            for i, b in enumerate(model.blocks))
        self.fc_w = nn.Parameter(torch.as_tensor(model.fc_weight.to_real(), dtype=torch.float32))
        self.fc_b = nn.Parameter(torch.as_tensor(model.fc_bias.to_real(), dtype=torch.float32))

    def forward(self, x, gen):
        for blk in self.blocks:
            x = blk(x, gen)
        feats = RoundSTE.apply(x.mean(dim=-1), ACT_FMT.resolution)
        w = RoundSTE.apply(self.fc_w, WEIGHT_FMT.resolution)
        return feats @ w.T + self.fc_b

    @torch.no_grad()
    def clip_(self):
        for blk in self.blocks:
            blk.latent.clamp_(-1.0, 1.0)
            blk.bias.clamp_(-BIAS_LIMIT, BIAS_LIMIT)
        self.fc_w.clamp_(WEIGHT_FMT.min_value, WEIGHT_FMT.max_value)
        self.fc_b.clamp_(ACT_FMT.min_value, ACT_FMT.max_value)

    def export(self, model: ModelSpec) -> ModelSpec:
        out = model.copy()
        bm = BiasMapping(model.mapping or MappingMethod.ADD)
        for blk, fb in zip(out.blocks, self.blocks):
            blk.weight = np.where(fb.latent.detach().numpy() >= 0, 1, -1).astype(np.int8)
            raw = np.rint(fb.bias.detach().double().numpy()).astype(np.int64)
            blk.raw_bias = raw
            blk.bias, _ = map_bias_values(raw, bm)
        out.fc_weight = QTensor.from_real(self.fc_w.detach().double().numpy(), WEIGHT_FMT)
        out.fc_bias = QTensor.from_real(self.fc_b.detach().double().numpy(), ACT_FMT)
        return out


def finetune_with_noise(model: ModelSpec, noise: NoiseModel, audio_raw, labels, epochs: int = 3,
                        batch_size: int = 32, lr: float = 1e-3, bias_lr: float = 0.05,
                        seed: int = 0) -> ModelSpec:
    """Short Adam fine-tune of blocks and classifier on the noisy forward pass."""
    labels = np.asarray(labels)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng([seed, 0xF17E])
    x_all = torch.as_tensor(sinc_layer(np.asarray(audio_raw, dtype=np.int64), model.sinc), dtype=torch.float32)
    net = FoldedNet(model, noise)
    biases = [b.bias for b in net.blocks]
    others = [p for n, p in net.named_parameters() if not n.endswith(".bias")]
    opt = torch.optim.Adam([{"params": others, "lr": lr}, {"params": biases, "lr": bias_lr}])
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            loss = F.cross_entropy(net(x_all[idx], gen), torch.as_tensor(labels[idx], dtype=torch.long))
            opt.zero_grad()
            loss.backward()
            opt.step()
            net.clip_()
    return net.export(model)


# -- pipeline -------------------------------------------------------------------

STAGE_NAMES = ("quantized", "bn_constraints", "noise", "compensation", "finetune")


@dataclass
class CompensationResult:
    model: ModelSpec
    compensated: ModelSpec
    deltas: list[np.ndarray]
    merge: MergeReport
    stages: list[dict] = field(default_factory=list)


def compensate_and_finetune(model: ModelSpec, noise: NoiseModel, train_audio, train_labels,
                            eval_audio=None, eval_labels=None, probe_size: int = 256,
                            trials: int = 1, finetune_epochs: int = 3, seed: int = 0,
                            statistic: str = "mean") -> CompensationResult:
    """Inject, compensate, fine-tune; stage accuracies go into ``stages``.

    The probe set is the first ``probe_size`` training clips. With zero noise
    every delta is zero and the fine-tune is skipped, so the returned model
    is identical to the input.
    """
    train_audio = np.asarray(train_audio, dtype=np.int64)
    train_labels = np.asarray(train_labels)
    if eval_audio is None:
        eval_audio, eval_labels = train_audio, train_labels
    backend = ImcBackend(noise=noise)
    stages = [
        ("quantized", accuracy(unconstrained(model), eval_audio, eval_labels)),
        ("bn_constraints", accuracy(model, eval_audio, eval_labels)),
        ("noise", accuracy(model, eval_audio, eval_labels, backend)),
    ]
    stats = collect_difference_stats(model, noise, train_audio[:probe_size], trials)
    deltas = derive_compensation(stats, statistic)
    compensated, merge = apply_compensation(model, deltas)
    stages.append(("compensation", accuracy(compensated, eval_audio, eval_labels, backend)))
    final = compensated
    if finetune_epochs > 0 and not noise.is_zero:
        final = finetune_with_noise(compensated, noise, train_audio, train_labels, finetune_epochs, seed=seed)
        stages.append(("finetune", accuracy(final, eval_audio, eval_labels, backend)))
    else:
        stages.append(("finetune", stages[-1][1]))
    final.meta = dict(final.meta, compensation={"noise": noise.to_dict(), "statistic": statistic,
                                                "probe_size": int(min(probe_size, len(train_audio))),
                                                "trials": trials, "finetune_epochs": finetune_epochs})
    if noise.is_zero:
        final = model.copy()
    rows = [{"stage": s, "accuracy": a, "seeds": 1} for s, a in stages]
    return CompensationResult(final, compensated, deltas, merge, rows)


def with_seed(noise: NoiseModel, seed: int) -> NoiseModel:
    return dataclasses.replace(noise, seed=seed)
