"""Experiment configuration: nested YAML merged over defaults."""

from __future__ import annotations

import copy
import dataclasses
from pathlib import Path

import yaml

from .imcsim import NoiseModel
from .model.arch import PRESETS, ArchConfig, BlockArch, ConfigError

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "gscd_root": "fixtures/gscd",
        "personal_root": "fixtures/personal",
        "keywords": ["yes", "no"],
        "test_fraction": 0.2,
    },
    "arch": {"preset": "desk"},
    "train": {"epochs": 10, "batch_size": 32, "lr": 0.01, "lr_min": 1e-9, "augment": True},
    "noise": {"mav_offset_sigma": 0.0, "sa_sigma": 0.0, "static_per_column": True},
    "inject": {"seeds": 5},
    "compensate": {"probe_size": 256, "trials": 1, "finetune_epochs": 3, "statistic": "mean"},
    "customize": {
        "epochs": 1000, "error_scaling": "hardware", "sga": True, "rgp": True, "rgp_lambda": 8.0,
        "rgp_position": "after", "per_keyword_train": 3, "people": 3, "backend": "digital",
    },
    "testmode": {"patterns": 256, "layer": 0},
    "fixtures": {"per_keyword": 100, "speakers": 3, "personal_per_cell": 5},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        where = f"{path}{key}"
        if isinstance(out.get(key), dict) and key != "arch":
            if not isinstance(val, dict):
                raise ConfigError(f"config section {where!r} must be a mapping")
            out[key] = _merge(out[key], val, where + ".")
        else:
            out[key] = val
    return out


def load_config(path=None, seed: int | None = None) -> dict:
    """Defaults, then the YAML file, then the ``seed`` override."""
    user = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = _merge(DEFAULTS, user)
    kws = cfg["data"]["keywords"]
    if not all(isinstance(k, str) for k in kws):
        raise ConfigError(f"data.keywords must be strings, got {kws!r}; quote yes/no/on/off in YAML")
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def arch_from_config(cfg: dict) -> ArchConfig:
    """``arch.preset`` picks a base; any other key overrides a field."""
    section = dict(cfg.get("arch") or {})
    preset = section.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown arch preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]
    if "blocks" in section:
        section["blocks"] = tuple(BlockArch(**b) if isinstance(b, dict) else BlockArch(*b)
                                  for b in section["blocks"])
    if "num_classes" not in section:
        section["num_classes"] = len(cfg["data"]["keywords"])
    try:
        return dataclasses.replace(base, **section)
    except TypeError as exc:
        raise ConfigError(f"bad arch field: {exc}") from exc


def noise_from_config(cfg: dict, seed: int | None = None) -> NoiseModel:
    n = dict(cfg["noise"])
    n.setdefault("seed", cfg["seed"])
    if seed is not None:
        n["seed"] = seed
    try:
        return NoiseModel(**n)
    except TypeError as exc:
        raise ConfigError(f"bad noise field: {exc}") from exc


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
