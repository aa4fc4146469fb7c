from .arch import (
    DESK_ARCH,
    PAPER_ARCH,
    PRESETS,
    ArchConfig,
    BlockArch,
    ConfigError,
    ConvBlockSpec,
    DegenerateBN,
    InvalidCutoffs,
    ModelSpec,
    SincLayerSpec,
    count_parameters,
    fold_bn,
)
from .network import DIGITAL, ImcBackend, accuracy, features, forward, predict, sinc_forward

__all__ = [
    "DESK_ARCH", "PAPER_ARCH", "PRESETS", "ArchConfig", "BlockArch", "ConfigError", "ConvBlockSpec",
    "DegenerateBN", "InvalidCutoffs", "ModelSpec", "SincLayerSpec", "count_parameters", "fold_bn",
    "DIGITAL", "ImcBackend", "accuracy", "features", "forward", "predict", "sinc_forward",
]
