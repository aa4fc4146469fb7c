"""Command-line driver: ``kwsimc <command> --config cfg.yaml --out DIR``.

Every command writes its reports (TSV plus PNG) into ``--out`` together
with ``config.yaml`` (the resolved configuration) and ``run.json`` (seeds,
input hashes and output hashes). Failures exit nonzero and print a JSON
error record on stderr, also saved as ``error.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, dataio, reports
from .compensate import compensate_and_finetune
from .config import arch_from_config, dump, load_config, noise_from_config
from .fixedpoint import ACT_FMT, WEIGHT_FMT, dequantize_raw
from .imcsim import MAPPING_ORDER, ZERO_NOISE, ImcMacro, test_mode, test_patterns
from .model import checkpoint, network
from .model.arch import ConfigError
from .model.training import TrainConfig, train_offline
from .tensorcore import fully_connected
from .trainer import (
    ErrorScaling,
    FeatureBuffer,
    TrainerConfig,
    TrainerState,
    customize,
    float_finetune,
    float_predict,
    trace_accuracy,
)

log = logging.getLogger("kwsimc")

TOGGLES = ("es", "sga", "rgp")


class CliError(RuntimeError):
    pass


class Run:
    """Collects inputs/outputs of one command and writes the run record."""

    def __init__(self, command: str, cfg: dict, out: Path, args: dict):
        self.command, self.cfg, self.out, self.args = command, cfg, out, args
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.seeds: dict[str, int] = {"seed": int(cfg["seed"])}
        out.mkdir(parents=True, exist_ok=True)

    def input(self, name: str, digest: str):
        self.inputs[name] = digest

    def tsv(self, name: str, rows, columns=None) -> Path:
        p = reports.write_tsv(self.out / name, rows, columns)
        self.outputs.append(p)
        return p

    def add(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def finish(self):
        snap = self.out / "config.yaml"
        snap.write_text(dump(self.cfg))
        record = {
            "command": self.command,
            "version": __version__,
            "args": self.args,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {p.name: reports.sha256_file(p) for p in sorted(set(self.outputs))},
            "config_sha256": reports.sha256_file(snap),
        }
        (self.out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -- helpers --------------------------------------------------------------------

def _dataset(cfg):
    d = cfg["data"]
    return dataio.load_gscd(d["gscd_root"], keywords=tuple(d["keywords"]), seed=cfg["seed"],
                            test_fraction=d["test_fraction"])


def _personal(cfg):
    d, c = cfg["data"], cfg["customize"]
    return dataio.build_personal_split(d["personal_root"], keywords=tuple(d["keywords"]),
                                       per_keyword_train=c["per_keyword_train"], people=c["people"],
                                       seed=cfg["seed"])


def _split(cfg, run: Run, name: str):
    if name in ("personal-train", "personal-test"):
        ds = _personal(cfg)
        run.input("personal_manifest", ds.manifest_hash())
        sub = ds.subset(name.split("-")[1])
    else:
        ds = _dataset(cfg)
        run.input("gscd_manifest", ds.manifest_hash())
        sub = ds.subset(name)
    return sub.audio_8bit(), sub.labels


def _load_model(run: Run, path):
    if path is None:
        raise CliError("--checkpoint is required for this command")
    path = Path(path)
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    run.input("checkpoint", reports.sha256_file(path))
    return checkpoint.load(path)


def _backend(name: str, noise):
    if name == "digital":
        return network.DIGITAL
    if name == "imc":
        return network.ImcBackend(noise=noise)
    raise CliError(f"unknown backend {name!r}")


def _save_model(run: Run, model, name: str):
    p = checkpoint.save(model, run.out / name)
    run.add(p)
    run.add(p.with_name(p.name + ".json"))


def parse_toggles(text: str | None, cfg: dict) -> dict:
    """``"es,sga,rgp"`` / ``"none"`` -> trainer flags; ``None`` keeps the config."""
    c = cfg["customize"]
    if text is None:
        return {"error_scaling": c["error_scaling"], "sga": bool(c["sga"]), "rgp": bool(c["rgp"])}
    names = {t.strip() for t in text.split(",") if t.strip()} - {"none"}
    bad = names - set(TOGGLES)
    if bad:
        raise CliError(f"unknown toggles {sorted(bad)}; choose from {TOGGLES} or 'none'")
    es = c["error_scaling"] if c["error_scaling"] != "none" else "hardware"
    return {"error_scaling": es if "es" in names else "none", "sga": "sga" in names, "rgp": "rgp" in names}


# -- commands -------------------------------------------------------------------

def cmd_fixtures(args, cfg, run: Run):
    f = cfg["fixtures"]
    root = dataio.make_fixtures(run.out, keywords=tuple(cfg["data"]["keywords"]), per_keyword=f["per_keyword"],
                                speakers=f["speakers"], personal_per_cell=f["personal_per_cell"],
                                seed=cfg["seed"])
    ds = dataio.load_gscd(root / "gscd", keywords=tuple(cfg["data"]["keywords"]), seed=cfg["seed"])
    dataio.write_manifest(ds, run.out / "gscd_manifest.tsv")
    run.add(run.out / "gscd_manifest.tsv")
    pers = dataio.build_personal_split(root / "personal", keywords=tuple(cfg["data"]["keywords"]),
                                       per_keyword_train=cfg["customize"]["per_keyword_train"],
                                       people=min(cfg["customize"]["people"], f["speakers"]), seed=cfg["seed"])
    dataio.write_manifest(pers, run.out / "personal_manifest.tsv")
    run.add(run.out / "personal_manifest.tsv")


def cmd_train(args, cfg, run: Run):
    ds = _dataset(cfg)
    run.input("gscd_manifest", ds.manifest_hash())
    tr, te = ds.subset("train"), ds.subset("test")
    t = cfg["train"]
    tcfg = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], lr_min=t["lr_min"],
                       augment=t["augment"], seed=cfg["seed"])
    res = train_offline(tr.audio(), tr.labels, arch_from_config(cfg), tcfg,
                        augment_fn=dataio.augment, quantize_fn=dataio.quantize_clips)
    _save_model(run, res.model, "model.ckpt")
    run.tsv("train_history.tsv", res.history, ["epoch", "loss", "train_accuracy", "lr"])
    rows = []
    for name, sub in (("train", tr), ("test", te)):
        x, y = sub.audio_8bit(), sub.labels
        rows.append({"split": name, "total": len(y), "accuracy": network.accuracy(res.model, x, y)})
    run.tsv("train_metrics.tsv", rows, ["split", "total", "accuracy"])
    run.add(reports.line_chart(run.out / "train_curve.png", [h["epoch"] for h in res.history],
                               {"train accuracy": [h["train_accuracy"] for h in res.history]},
                               "epoch", "accuracy", "offline training"))


def cmd_eval(args, cfg, run: Run):
    model = _load_model(run, args.checkpoint)
    x, y = _split(cfg, run, args.split)
    noise = ZERO_NOISE if args.noise == "zero" else noise_from_config(cfg)
    pred = network.predict(network.forward(model, x, _backend(args.backend, noise)))
    rows = [{"split": args.split, "class": "all", "total": len(y), "correct": int(np.sum(pred == y)),
             "accuracy": float(np.mean(pred == y)) if len(y) else float("nan")}]
    keywords = cfg["data"]["keywords"]
    for c, kw in enumerate(keywords):
        m = y == c
        rows.append({"split": args.split, "class": kw, "total": int(m.sum()), "correct": int(np.sum(pred[m] == c)),
                     "accuracy": float(np.mean(pred[m] == c)) if m.any() else float("nan")})
    run.tsv("metrics.tsv", rows, ["split", "class", "total", "correct", "accuracy"])
    run.tsv("predictions.tsv", [{"index": i, "label": int(a), "prediction": int(b)}
                                for i, (a, b) in enumerate(zip(y, pred))])
    run.add(reports.bar_chart(run.out / "metrics.png", [r["class"] for r in rows],
                              [r["accuracy"] for r in rows], "accuracy (%)", f"{args.split} accuracy"))


def cmd_constrain(args, cfg, run: Run):
    model = _load_model(run, args.checkpoint)
    x, y = _split(cfg, run, args.split)
    base = network.accuracy(network.unconstrained(model), x, y)
    best, scores = network.select_model_mapping(model, x, y)
    constrained = network.with_mapping(model, best)
    _save_model(run, constrained, "constrained.ckpt")
    rows = [{"stage": "quantized", "mapping": "none", "accuracy": base, "selected": False}]
    rows += [{"stage": "bn_constraints", "mapping": m.value, "accuracy": scores[m], "selected": m == best}
             for m in MAPPING_ORDER]
    run.tsv("constrain.tsv", rows, ["stage", "mapping", "accuracy", "selected"])
    run.add(reports.bar_chart(run.out / "constrain.png", [r["mapping"] for r in rows],
                              [r["accuracy"] for r in rows], "accuracy (%)", "bias mapping"))


def _inject_one(job):
    model, x, y, noise = job
    return network.accuracy(model, x, y, network.ImcBackend(noise=noise))


def cmd_inject(args, cfg, run: Run):
    model = _load_model(run, args.checkpoint)
    x, y = _split(cfg, run, args.split)
    n = args.seeds if args.seeds is not None else cfg["inject"]["seeds"]
    seeds = [cfg["seed"] + k for k in range(n)]
    run.seeds["noise_seeds"] = seeds
    jobs = [(model, x, y, noise_from_config(cfg, s)) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            accs = list(ex.map(_inject_one, jobs))
    else:
        accs = [_inject_one(j) for j in jobs]
    run.tsv("inject.tsv", [{"seed": s, "accuracy": a} for s, a in zip(seeds, accs)], ["seed", "accuracy"])
    clean = network.accuracy(model, x, y)
    run.tsv("inject_summary.tsv", [{"clean_accuracy": clean, "mean": float(np.mean(accs)),
                                    "std": float(np.std(accs)), "seeds": len(seeds)}])
    run.add(reports.bar_chart(run.out / "inject.png", [f"seed {s}" for s in seeds], accs,
                              "accuracy (%)", "noisy IMC accuracy"))


def cmd_compensate(args, cfg, run: Run):
    model = _load_model(run, args.checkpoint)
    x, y = _split(cfg, run, "train")
    xe, ye = _split(cfg, run, args.split)
    c = cfg["compensate"]
    n = args.seeds if args.seeds is not None else 1
    seeds = [cfg["seed"] + k for k in range(n)]
    run.seeds["noise_seeds"] = seeds
    per_seed, first = [], None
    for s in seeds:
        res = compensate_and_finetune(model, noise_from_config(cfg, s), x, y, xe, ye,
                                      probe_size=c["probe_size"], trials=c["trials"],
                                      finetune_epochs=c["finetune_epochs"], seed=s, statistic=c["statistic"])
        first = first or res
        per_seed += [{"seed": s, **r} for r in res.stages]
        clamped = sum(int(m.sum()) for m in res.merge.range_exceeded)
        per_seed.append({"seed": s, "stage": "range_exceeded_channels", "accuracy": float(clamped), "seeds": 1})
    _save_model(run, first.model, "compensated.ckpt")
    run.tsv("compensate_seeds.tsv", per_seed, ["seed", "stage", "accuracy"])
    stages = [r["stage"] for r in first.stages]
    rows = [{"stage": st, "accuracy": float(np.mean([r["accuracy"] for r in per_seed if r["stage"] == st])),
             "seeds": len(seeds)} for st in stages]
    run.tsv("compensate.tsv", rows, ["stage", "accuracy", "seeds"])
    run.add(reports.bar_chart(run.out / "compensate.png", stages, [r["accuracy"] for r in rows],
                              "accuracy (%)", "compensation ablation"))


def cmd_customize(args, cfg, run: Run):
    model = _load_model(run, args.checkpoint)
    c = cfg["customize"]
    ds = _personal(cfg)
    run.input("personal_manifest", ds.manifest_hash())
    tr, te = ds.subset("train"), ds.subset("test")
    backend = _backend(args.backend or c["backend"], noise_from_config(cfg))
    ftr = network.features(model, tr.audio_8bit(), backend).data
    fte = network.features(model, te.audio_8bit(), backend).data
    buf = FeatureBuffer(ftr, tr.labels)
    test = FeatureBuffer(fte, te.labels, capacity=max(len(te.labels), 1))
    state = TrainerState.from_model(model)
    epochs = args.epochs if args.epochs is not None else c["epochs"]
    common = dict(batch_size=len(buf), rgp_lambda=c["rgp_lambda"], rgp_position=c["rgp_position"],
                  seed=cfg["seed"])
    main_flags = parse_toggles(args.toggles, cfg)
    final, trace = customize(state, buf, epochs, TrainerConfig(**main_flags, **common), test)
    _save_model(run, final.apply_to(model), "customized.ckpt")
    run.tsv("customize_trace.tsv", trace)
    es = c["error_scaling"] if c["error_scaling"] != "none" else ErrorScaling.HARDWARE.value
    ladder = [("naive", dict(error_scaling="none", sga=False, rgp=False)),
              ("error_scaling", dict(error_scaling=es, sga=False, rgp=False)),
              ("sga", dict(error_scaling=es, sga=True, rgp=False)),
              ("rgp", dict(error_scaling=es, sga=True, rgp=True))]
    rows = [{"stage": "before", "accuracy": _int_accuracy(state, test)}]
    for name, flags in ladder:
        _, tr_ = customize(state, buf, epochs, TrainerConfig(**flags, **common), test)
        rows.append({"stage": name, "accuracy": trace_accuracy(tr_[-1])})
    b_real = dequantize_raw(state.b, ACT_FMT)
    w_ref = float_finetune(dequantize_raw(state.W, WEIGHT_FMT), b_real, dequantize_raw(ftr, ACT_FMT),
                           tr.labels, epochs=epochs, batch_size=len(buf))
    pred = float_predict(w_ref, b_real, dequantize_raw(fte, ACT_FMT))
    ref = float(np.mean(pred == te.labels)) if len(te.labels) else float("nan")
    rows.append({"stage": "float_reference", "accuracy": ref})
    rows.append({"stage": "selected_toggles", "accuracy": trace_accuracy(trace[-1]) if trace else rows[0]["accuracy"]})
    run.tsv("customize.tsv", rows, ["stage", "accuracy"])
    run.add(reports.line_chart(run.out / "customize.png", [r["epoch"] for r in trace],
                               {"test": [trace_accuracy(r) for r in trace],
                                "train": [trace_accuracy(r, "train") for r in trace]},
                               "epoch", "accuracy", "on-chip customization"))


def _int_accuracy(state: TrainerState, data: FeatureBuffer) -> float:
    if len(data) == 0:
        return float("nan")
    scores = fully_connected(data.qtensor(), state.weight(), state.bias())
    return float(np.mean(network.predict(scores) == data.labels))


def cmd_testmode(args, cfg, run: Run):
    model = _load_model(run, args.checkpoint)
    t = cfg["testmode"]
    layer = int(t["layer"])
    if not 0 <= layer < len(model.blocks):
        raise CliError(f"testmode layer {layer} out of range 0..{len(model.blocks) - 1}")
    blk = model.blocks[layer]
    noise = noise_from_config(cfg)
    rows = []
    for m0 in range(0, blk.out_channels, 8):
        chans = list(range(m0, min(m0 + 8, blk.out_channels)))
        macro = ImcMacro(macro_id=layer)
        macro.load(blk.weight[chans[0]:chans[-1] + 1, :], blk.bias[chans[0]:chans[-1] + 1],
                   blk.polarity[chans[0]:chans[-1] + 1])
        offsets = noise.static_offsets(layer, blk.out_channels)[chans[0]:chans[-1] + 1]
        macro_noise = _macro_noise(noise, offsets)
        pats = test_patterns(macro.fan_in, t["patterns"], seed=cfg["seed"])
        rep = test_mode(macro, pats, macro_noise, np.random.default_rng([cfg["seed"], m0]))
        for r, off in zip(rep.to_rows(), offsets):
            rows.append({"layer": layer, "channel": m0 + r["bank"], "bank": r["bank"],
                         "disagreements": r["disagreements"], "patterns": r["patterns"],
                         "estimated_offset": r["estimated_offset"], "max_margin": r["max_margin"],
                         "injected_offset": float(off)})
    run.tsv("testmode.tsv", rows, ["layer", "channel", "bank", "disagreements", "patterns",
                                   "estimated_offset", "max_margin", "injected_offset"])
    run.add(reports.scatter_chart(run.out / "testmode.png", [r["injected_offset"] for r in rows],
                                  [r["estimated_offset"] for r in rows], "injected offset",
                                  "estimated offset", f"test mode, layer {layer}"))


def _macro_noise(noise, offsets):
    padded = np.zeros(8)
    padded[:len(offsets)] = offsets
    return dataclasses.replace(noise, mav_offset_sigma=0.0, column_offsets=tuple(padded))


COMMANDS = {
    "fixtures": cmd_fixtures,
    "train": cmd_train,
    "eval": cmd_eval,
    "constrain": cmd_constrain,
    "inject": cmd_inject,
    "compensate": cmd_compensate,
    "customize": cmd_customize,
    "testmode": cmd_testmode,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kwsimc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML config file")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--checkpoint", help="model checkpoint")
        s.add_argument("--backend", choices=("digital", "imc"), default=None)
        s.add_argument("--noise", choices=("zero", "config"), default="config")
        s.add_argument("--split", default="test",
                       choices=("train", "test", "personal-train", "personal-test"))
        s.add_argument("--seeds", type=int, help="number of noise seeds")
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--toggles", help="comma list of es,sga,rgp or 'none'")
        s.add_argument("--epochs", type=int, help="override the epoch count")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _run_args(args) -> dict:
    keep = ("checkpoint", "backend", "noise", "split", "seeds", "toggles", "epochs")
    return {k: getattr(args, k) for k in keep if getattr(args, k) is not None}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.seed)
        if args.backend is None and args.command == "eval":
            args.backend = "digital"
        run = Run(args.command, cfg, out, _run_args(args))
        COMMANDS[args.command](args, cfg, run)
        run.finish()
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        kind = (ConfigError, CliError, dataio.DataError, checkpoint.CheckpointError, FileNotFoundError)
        code = 2 if isinstance(exc, kind) else 1
        record["exit_code"] = code
        text = json.dumps(record, sort_keys=True)
        print(text, file=sys.stderr)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(text + "\n")
        except OSError:
            pass
        if args.verbose:
            log.exception("command failed")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
