import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwsimc.fixedpoint import ACT_FMT, AUDIO_FMT, WEIGHT_FMT
from kwsimc.imcsim import MAPPING_ORDER, NoiseModel, map_bias_values
from kwsimc.model import checkpoint, network
from kwsimc.model.arch import (
    DESK_ARCH,
    PAPER_ARCH,
    ArchConfig,
    BlockArch,
    ConfigError,
    ConvBlockSpec,
    DegenerateBN,
    InvalidCutoffs,
    ModelSpec,
    SincLayerSpec,
    bn_preactivation,
    count_parameters,
    fold_bn,
    mel_cutoffs,
)
from kwsimc.tensorcore import QTensor

SMALL_ARCH = dataclasses.replace(DESK_ARCH, num_samples=512, sinc_pool=2, num_classes=3)


def random_model(arch: ArchConfig, seed: int = 0, odd_bias: bool = False) -> ModelSpec:
    rng = np.random.default_rng(seed)
    low, band = mel_cutoffs(arch.sinc_filters, arch.sample_rate)
    sinc = SincLayerSpec(low, band, arch.sinc_kernel, arch.sample_rate, arch.sinc_pool,
                         bias=rng.integers(-40, 40, arch.sinc_filters))
    blocks = []
    for i, b in enumerate(arch.blocks):
        g = arch.groups(i)
        w = rng.choice([-1, 1], size=(b.out_channels, arch.in_channels(i) // g, b.kernel))
        raw = rng.integers(-12, 13, b.out_channels)
        if odd_bias:
            raw = raw | 1
        pol = rng.choice([-1, 1], size=b.out_channels)
        mapped, _ = map_bias_values(raw)
        blocks.append(ConvBlockSpec(w, mapped, g, b.pool, pol, raw_bias=raw))
    fc_w = QTensor(rng.integers(-128, 128, (arch.num_classes, arch.feature_dim)), WEIGHT_FMT)
    fc_b = QTensor(rng.integers(-16, 16, arch.num_classes), ACT_FMT)
    return ModelSpec(arch, sinc, blocks, fc_w, fc_b)


def random_audio(n, length, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(AUDIO_FMT.raw_min, AUDIO_FMT.raw_max + 1, size=(n, length))


def test_parameter_count():
    assert abs(count_parameters(PAPER_ARCH) - 125_000) <= 12_500
    assert PAPER_ARCH.group_size == 24 and len(PAPER_ARCH.blocks) == 5
    assert PAPER_ARCH.sinc_kernel == 15


def test_arch_validation():
    with pytest.raises(ConfigError):
        ArchConfig(sinc_kernel=14)
    with pytest.raises(ConfigError):
        ArchConfig(blocks=(BlockArch(50, 3, 1), BlockArch(48, 3, 1)))
    assert ArchConfig.from_dict(DESK_ARCH.to_dict()) == DESK_ARCH


def test_sinc_kernels():
    low, band = mel_cutoffs(24, 16000)
    spec = SincLayerSpec(low, band)
    w = spec.weight
    assert w.shape == (24, 15)
    assert np.array_equal(w, w[:, ::-1])
    assert np.all((w == 1).any(axis=1) & (w == -1).any(axis=1))
    with pytest.raises(InvalidCutoffs):
        SincLayerSpec(np.array([7000.0]), np.array([2000.0]))
    with pytest.raises(InvalidCutoffs):
        SincLayerSpec(low, band, kernel_size=14)


def test_sinc_zero_audio_gives_sign_of_bias():
    low, band = mel_cutoffs(24, 16000)
    bias = np.tile([-3, 0, 5], 8)
    spec = SincLayerSpec(low, band, bias=bias)
    out = network.sinc_forward(QTensor(np.zeros(64), AUDIO_FMT), spec)
    assert np.array_equal(out.data, np.repeat(np.where(bias >= 0, 1, -1)[:, None], 64, axis=1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sinc_bitplanes_match_direct(seed):
    low, band = mel_cutoffs(24, 16000)
    spec = SincLayerSpec(low, band)
    audio = random_audio(3, 200, seed)
    assert np.array_equal(network.sinc_dot_bitplanes(audio, spec.weight),
                          network.sinc_dot_direct(audio, spec.weight))


def test_fold_bn_examples():
    assert fold_bn(1, 0, 0, 1) == (np.array([0]), np.array([1]))
    bias, pol = fold_bn(1, 2, 3, 1)
    assert bias[0] == -1 and pol[0] == 1
    _, pol = fold_bn(-1, 0, 0, 1)
    assert pol[0] == -1
    with pytest.raises(DegenerateBN):
        fold_bn(1, 0, 0, 0)


@settings(max_examples=300)
@given(st.floats(-5, 5).filter(lambda g: abs(g) > 1e-3), st.floats(-5, 5), st.floats(-60, 60),
       st.floats(0.05, 20), st.floats(-3, 3))
def test_fold_bn_exhaustive(gamma, beta, mu, sigma, offset):
    bias, pol = fold_bn(gamma, beta, mu, sigma, offset)
    x = np.arange(-216, 217)
    want = np.where(bn_preactivation(x, gamma, beta, mu, sigma, offset) >= 0, 1, -1)
    got = pol[0] * np.where(x + bias[0] >= 0, 1, -1)
    assert np.array_equal(want, got)


def test_backend_equivalence_and_determinism():
    model = random_model(SMALL_ARCH, seed=1)
    audio = random_audio(100, SMALL_ARCH.num_samples, seed=2)
    digital = network.forward(model, audio)
    imc = network.forward(model, audio, network.ImcBackend(noise=NoiseModel()))
    assert digital == imc
    assert np.array_equal(network.predict(digital), network.predict(network.forward(model, audio)))
    noisy = network.ImcBackend(noise=NoiseModel(mav_offset_sigma=3, sa_sigma=1, seed=4))
    assert network.forward(model, audio, noisy) == network.forward(model, audio, noisy)
    single = network.forward(model, audio[0])
    assert np.array_equal(single.data, digital.data[0])


def test_checkpoint_roundtrip(tmp_path):
    model = random_model(SMALL_ARCH, seed=3)
    path = checkpoint.save(model, tmp_path / "m.ckpt")
    back = checkpoint.load(path)
    assert checkpoint.to_bytes(back) == checkpoint.to_bytes(model)
    audio = random_audio(8, SMALL_ARCH.num_samples, seed=5)
    assert network.forward(back, audio) == network.forward(model, audio)
    assert (tmp_path / "m.ckpt.json").exists()
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(b"garbage!" + bytes(10))


def test_select_mapping_odd_biases():
    model = random_model(SMALL_ARCH, seed=6, odd_bias=True)
    audio = random_audio(40, SMALL_ARCH.num_samples, seed=7)
    labels = network.predict(network.forward(network.unconstrained(model), audio))
    best, scores = network.select_model_mapping(model, audio, labels)
    exhaustive = {m: network.accuracy(network.with_mapping(model, m), audio, labels) for m in MAPPING_ORDER}
    assert scores == exhaustive
    assert best == max(MAPPING_ORDER, key=lambda m: (exhaustive[m], -MAPPING_ORDER.index(m)))
    even = random_model(SMALL_ARCH, seed=6)
    for blk in even.blocks:
        blk.raw_bias = blk.bias = blk.raw_bias * 2
    assert network.select_model_mapping(even, audio, labels)[0] is MAPPING_ORDER[0]
    with pytest.raises(ValueError):
        network.select_model_mapping(model, audio[:0], labels[:0])


def test_trained_model(trained, splits):
    model = trained["model"]
    offsets = [blk.act_offset for blk in model.blocks]
    assert any(np.any(o != 0) for o in offsets)
    assert len({round(float(np.mean(o)), 6) for o in offsets}) > 1
    x, _ = splits["test"]
    assert np.array_equal(network.predict(network.forward(model, x)),
                          network.predict(network.forward(checkpoint.load(trained["path"]), x)))
    for blk in model.blocks:
        assert np.all(blk.bias % 2 == 0) and np.all(np.abs(blk.bias) <= 64)
