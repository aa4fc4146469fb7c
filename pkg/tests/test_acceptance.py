"""Acceptance criteria, one test each; every test reports a pass/fail line."""

from __future__ import annotations

import math
import time
from fractions import Fraction

import numpy as np
import pytest
import yaml

from conftest import KEYWORDS, TRAIN_EPOCHS, report
from kwsimc import cli
from kwsimc.ablation import run_ablation
from kwsimc.compensate import apply_compensation, collect_difference_stats, compensate_and_finetune, derive_compensation
from kwsimc.fixedpoint import ACT_FMT, exp_table
from kwsimc.imcsim import BIAS_LIMIT, MAPPING_ORDER, BiasMapping, ImcMacro, NoiseModel, bias_cells, map_bias_values, read_row
from kwsimc.model import checkpoint, network
from kwsimc.tensorcore import binary_conv1d
from kwsimc.trainer import g_threshold, g_threshold_raw, rgp_noise_raw, sga_step, sga_vec

ABLATION_SEEDS = range(5)


def conv_oracle(x, w, groups, bias):
    c, length = x.shape
    out_ch, per_group, k = w.shape
    out_per = out_ch // groups
    left = (k - 1) // 2
    out = np.zeros((out_ch, length), dtype=np.int64)
    for o in range(out_ch):
        g = o // out_per
        for t in range(length):
            acc = 0
            for i in range(per_group):
                for j in range(k):
                    pos = t + j - left
                    v = x[g * per_group + i, pos] if 0 <= pos < length else -1
                    acc += int(w[o, i, j]) * int(v)
            out[o, t] = acc + bias[o]
    return out


def test_c1_oracle_equivalence():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    conv_bad = 0
    for _ in range(10_000):
        groups = int(rng.integers(1, 4))
        per_group = int(rng.integers(1, 4))
        out_per = int(rng.integers(1, 3))
        k = int(rng.choice([1, 3, 5]))
        length = int(rng.integers(1, 7))
        x = rng.choice([-1, 1], size=(groups * per_group, length))
        w = rng.choice([-1, 1], size=(groups * out_per, per_group, k))
        bias = rng.integers(-8, 9, size=groups * out_per)
        conv_bad += not np.array_equal(binary_conv1d(x, w, groups, bias), conv_oracle(x, w, groups, bias))
    mav_bad = 0
    macro = ImcMacro()
    for _ in range(10_000):
        fan_in = int(rng.integers(1, 64 * 8))
        banks = int(rng.integers(1, 9))
        w = rng.choice([-1, 1], size=(banks, fan_in))
        bias = rng.integers(-70, 71, size=banks)
        method = MAPPING_ORDER[int(rng.integers(4))]
        macro.load(w, bias, mapping=BiasMapping(method))
        mapped, _ = map_bias_values(bias, BiasMapping(method))
        x = rng.choice([-1, 1], size=fan_in)
        expected = np.where(binary_conv1d(x[:, None], w[:, :, None], 1, mapped)[:, 0] >= 0, 1, -1)
        mav_bad += not np.array_equal(macro.mav_compute(x), expected)
    seconds = time.perf_counter() - start
    ok = conv_bad == 0 and mav_bad == 0 and seconds < 30
    report(1, "oracle equivalence", ok,
           f"conv mismatches {conv_bad}/10000, mav mismatches {mav_bad}/10000, {seconds:.1f}s (< 30s)")
    assert ok


def alg1_literal(G, G_accu, G_th):
    # transcription of the published state machine, applied to magnitudes
    if abs(G) < G_th:
        if abs(G_accu) < G_th:
            G_accu = G_accu + G
            return None, G_accu
        else:
            G_update = G_accu + G
            G_accu = 0
            return G_update, G_accu
    else:
        G_update = G
        return G_update, G_accu


def test_c2_sga_exhaustive():
    start = time.perf_counter()
    th = Fraction(78125, 10**6)
    th_raw = int(th * 256)
    grid = range(-64, 65)
    mismatches = 0
    cases = 0
    for g in grid:
        for a in grid:
            G, A = Fraction(g, 128), Fraction(a, 128)
            want = alg1_literal(G, A, th)
            mismatches += sga_step(G, A, th) != want
            upd, emitted, accu = sga_vec(np.array([2 * g]), np.array([2 * a]), th_raw)
            got = (Fraction(int(upd[0]), 256) if emitted[0] else None, Fraction(int(accu[0]), 256))
            mismatches += got != want
            cases += 1
    seconds = time.perf_counter() - start
    ok = mismatches == 0 and seconds < 5
    report(2, "SGA exhaustive", ok, f"{cases} state pairs, {mismatches} mismatches, {seconds:.2f}s (< 5s)")
    assert ok


def test_c3_threshold_formula():
    values = {lr: g_threshold(lr) for lr in ("0.05", "0.01", "0.001")}
    want = {"0.05": Fraction(78125, 10**6), "0.01": Fraction(390625, 10**6), "0.001": Fraction(390625, 10**5)}
    ok = values == want and g_threshold_raw(4) == 16 and g_threshold_raw(7) == 128
    detail = ", ".join(f"LR {lr} -> {float(v)}" for lr, v in values.items())
    report(3, "G_th formula", ok, detail + " (table values 0.039/0.39 disagree; formula kept)")
    assert ok


def test_c4_exp_lut():
    start = time.perf_counter()
    table = exp_table(ACT_FMT)
    z = np.arange(ACT_FMT.raw_min, ACT_FMT.raw_max + 1) * ACT_FMT.resolution
    vals = np.array([e.value for e in table])
    rel = np.max(np.abs(vals - np.exp(z)) / np.exp(z))
    monotone = bool(np.all(np.diff(vals) >= 0))
    seconds = time.perf_counter() - start
    ok = len(table) == 256 and rel <= 2**-4 and monotone and seconds < 1
    report(4, "exp LUT", ok, f"256 entries, max rel err {rel:.2e} (<= {2**-4}), monotone {monotone}, {seconds:.3f}s")
    assert ok


def test_c5_parity_range():
    rng = np.random.default_rng(5)
    bias = rng.integers(-200, 201, size=100_000)
    bad = 0
    for m in MAPPING_ORDER:
        mapped, _ = map_bias_values(bias, BiasMapping(m))
        bad += int(np.sum((mapped % 2 != 0) | (np.abs(mapped) > BIAS_LIMIT)))
    readback = sum(read_row(bias_cells(v)) == v for v in range(-64, 65, 2))
    ok = bad == 0 and readback == 65
    report(5, "parity and range", ok, f"4 x 100000 mappings, {bad} violations, readback {readback}/65")
    assert ok


@pytest.fixture(scope="module")
def ablation():
    start = time.perf_counter()
    runs = [run_ablation(s, epochs=200) for s in ABLATION_SEEDS]
    return runs, time.perf_counter() - start


def test_c6_customization_ablation(ablation):
    runs, seconds = ablation
    lines, ordered, all_ok = [], 0, True
    for r in runs:
        gap = r["float_reference"] - r["before"]
        a = r["naive"] - r["before"] < 0.03
        b = r["error_scaling"] >= r["before"] + gap / 2
        c = r["sga"] >= r["float_reference"] - 0.02
        ordered += r["naive"] < r["error_scaling"] < r["sga"]
        all_ok &= a and b and c and r["source_accuracy"] >= 0.95
        lines.append(f"seed {r['seed']}: src {r['source_accuracy']:.3f} before {r['before']:.3f} "
                     f"naive {r['naive']:.3f} es {r['error_scaling']:.3f} sga {r['sga']:.3f} "
                     f"float {r['float_reference']:.3f}")
    ok = all_ok and ordered >= 4 and seconds < 120
    report(6, "customization ablation", ok,
           f"ordering on {ordered}/5 seeds, {seconds:.1f}s (< 120s); " + "; ".join(lines))
    assert ok


def test_c7_compensation_recovery(trained, splits):
    start = time.perf_counter()
    model = trained["model"]
    probe = splits["train"][0][:64]
    x, y = splits["test"]
    clean = network.accuracy(model, x, y)
    noisy, fixed = [], []
    for seed in range(5):
        noise = NoiseModel(mav_offset_sigma=8.0, seed=seed)
        backend = network.ImcBackend(noise=noise)
        noisy.append(network.accuracy(model, x, y, backend))
        deltas = derive_compensation(collect_difference_stats(model, noise, probe))
        comp, merge = apply_compensation(model, deltas)
        fixed.append(network.accuracy(comp, x, y, backend))
    drop = clean - np.mean(noisy)
    restored = (np.mean(fixed) - np.mean(noisy)) / drop if drop > 0 else float("nan")
    zero = compensate_and_finetune(model, NoiseModel(), splits["train"][0][:64], splits["train"][1][:64],
                                   x, y, probe_size=64)
    noop = checkpoint.to_bytes(zero.model) == checkpoint.to_bytes(model) and all(
        not d.any() for d in zero.deltas)
    seconds = time.perf_counter() - start
    ok = drop >= 0.25 and restored >= 0.9 and noop and seconds < 120
    report(7, "compensation recovery", ok,
           f"clean {clean:.3f}, noisy mean {np.mean(noisy):.3f} (drop {100 * drop:.1f} pts), "
           f"compensated mean {np.mean(fixed):.3f} (restores {100 * restored:.0f}% of drop), "
           f"zero-noise no-op {noop}, {seconds:.1f}s")
    assert ok


def _config(tmp, root) -> str:
    cfg = {
        "seed": 0,
        "data": {"gscd_root": str(root / "gscd"), "personal_root": str(root / "personal"),
                 "keywords": list(KEYWORDS)},
        "noise": {"mav_offset_sigma": 8.0},
        "compensate": {"probe_size": 32, "finetune_epochs": 1},
        "customize": {"epochs": 20},
        "testmode": {"patterns": 128},
    }
    path = tmp / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _tree_hashes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_c8_cli_determinism(trained, fixture_root, tmp_path):
    cfg = _config(tmp_path, fixture_root)
    ckpt = str(trained["path"])
    commands = [
        ["eval", "--backend", "imc"],
        ["constrain", "--split", "train"],
        ["inject", "--seeds", "2", "--jobs", "2"],
        ["compensate"],
        ["customize"],
        ["customize", "--toggles", "none"],
        ["testmode"],
    ]
    differing = []
    for cmd in commands:
        trees = []
        for rep in range(2):
            out = tmp_path / f"{'_'.join(c.strip('-') for c in cmd)}_{rep}"
            code = cli.main(cmd + ["--config", cfg, "--checkpoint", ckpt, "--out", str(out)])
            assert code == 0, (cmd, (out / "error.json").read_text())
            trees.append(_tree_hashes(out))
        if trees[0] != trees[1]:
            differing.append(cmd[0])
    ok = not differing
    report(8, "CLI determinism", ok,
           f"{len(commands)} commands run twice, outputs differing: {differing or 'none'}")
    assert ok


def test_c9_rgp_statistics(ablation):
    rng = np.random.default_rng(9)
    std = float(np.std(rgp_noise_raw(100_000, 8.0, rng) / 128))
    runs, _ = ablation
    steps = sum(r["rgp_steps"] for r in runs)
    same = sum(r["rgp_steps_unchanged"] for r in runs)
    frac = same / steps
    ok = abs(std - 0.125) <= 0.0125 and frac >= 0.95
    report(9, "RGP statistics", ok,
           f"lambda 8 std {std:.4f} (0.125 +- 10%), decisions unchanged on {same}/{steps} steps ({100 * frac:.1f}%)")
    assert ok


def test_c10_end_to_end(trained, splits, fixture_root, tmp_path):
    model = trained["model"]
    x, y = splits["train"]
    train_acc = network.accuracy(model, x, y)
    xt, _ = splits["test"]
    digital = network.forward(model, xt)
    imc = network.forward(model, xt, network.ImcBackend(noise=NoiseModel()))
    same_scores = digital == imc
    cfg = _config(tmp_path, fixture_root)
    ckpt = str(trained["path"])
    outs = {}
    for backend, noise in (("digital", "config"), ("imc", "zero")):
        out = tmp_path / f"eval_{backend}"
        assert cli.main(["eval", "--config", cfg, "--checkpoint", ckpt, "--backend", backend,
                         "--noise", noise, "--out", str(out)]) == 0
        outs[backend] = (out / "metrics.tsv").read_bytes()
    same_metrics = outs["digital"] == outs["imc"]
    ok = (len(y) + len(splits["test"][1]) == 200 and train_acc >= 0.9 and same_scores and same_metrics
          and trained["seconds"] < 300 and TRAIN_EPOCHS <= 20)
    report(10, "end-to-end smoke", ok,
           f"{TRAIN_EPOCHS} epochs in {trained['seconds']:.0f}s (< 300s), train accuracy {train_acc:.3f} (>= 0.9), "
           f"digital == zero-noise IMC scores {same_scores}, metrics files identical {same_metrics}")
    assert ok
    assert math.isfinite(train_acc)
