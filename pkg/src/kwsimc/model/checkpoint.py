"""Checkpoint container.

Layout (all little-endian)::

    b"KWSQCKPT"  u16 version  u32 header_len  header (UTF-8 JSON)
    repeated tensor records:
        u16 name_len  name  u8 width_bytes  u8 int_bits  u8 frac_bits
        u8 has_fmt  u8 ndim  u32 dims[ndim]  mantissas

The header carries the architecture and the real-valued sinc cutoffs; the
records carry integer mantissas only. A JSON manifest sidecar describes
the same content for humans.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from ..fixedpoint import QFormat
from ..tensorcore import QTensor
from .arch import ArchConfig, ConvBlockSpec, ModelSpec, SincLayerSpec, count_parameters, model_size_bits

MAGIC = b"KWSQCKPT"
VERSION = 1
_DTYPES = {1: "<i1", 2: "<i2", 4: "<i4"}


class CheckpointError(ValueError):
    pass


def _width_for(data: np.ndarray) -> int:
    lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
    for w in (1, 2, 4):
        if -(1 << (8 * w - 1)) <= lo and hi < (1 << (8 * w - 1)):
            return w
    raise CheckpointError("mantissa does not fit 32 bits")


def _write_tensor(buf: io.BytesIO, name: str, data: np.ndarray, fmt: QFormat | None):
    data = np.asarray(data, dtype=np.int64)
    width = _width_for(data)
    name_b = name.encode()
    buf.write(struct.pack("<H", len(name_b)))
    buf.write(name_b)
    buf.write(struct.pack("<BBBBB", width, fmt.int_bits if fmt else 0, fmt.frac_bits if fmt else 0,
                          1 if fmt else 0, data.ndim))
    buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
    buf.write(data.astype(_DTYPES[width]).tobytes())


def _read_tensor(view: memoryview, pos: int):
    (name_len,) = struct.unpack_from("<H", view, pos)
    pos += 2
    name = bytes(view[pos:pos + name_len]).decode()
    pos += name_len
    width, int_bits, frac_bits, has_fmt, ndim = struct.unpack_from("<BBBBB", view, pos)
    pos += 5
    if width not in _DTYPES:
        raise CheckpointError(f"bad element width {width} in {name}")
    dims = struct.unpack_from(f"<{ndim}I", view, pos)
    pos += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    nbytes = count * width
    data = np.frombuffer(view[pos:pos + nbytes], dtype=_DTYPES[width]).astype(np.int64).reshape(dims)
    pos += nbytes
    fmt = QFormat(int_bits, frac_bits) if has_fmt else None
    return name, data, fmt, pos


def _tensors(model: ModelSpec):
    yield "sinc.weight", model.sinc.weight, None
    yield "sinc.bias", model.sinc.bias, None
    yield "sinc.polarity", model.sinc.polarity, None
    for i, b in enumerate(model.blocks):
        yield f"blocks.{i}.weight", b.weight, None
        yield f"blocks.{i}.bias", b.bias, None
        yield f"blocks.{i}.raw_bias", b.raw_bias, None
        yield f"blocks.{i}.polarity", b.polarity, None
    yield "fc.weight", model.fc_weight.data, model.fc_weight.fmt
    yield "fc.bias", model.fc_bias.data, model.fc_bias.fmt


def _header(model: ModelSpec) -> dict:
    return {
        "arch": model.arch.to_dict(),
        "mapping": model.mapping,
        "sinc": {"low_hz": [float(v) for v in model.sinc.low_hz],
                 "band_hz": [float(v) for v in model.sinc.band_hz]},
        "act_offsets": [[float(v) for v in b.act_offset] for b in model.blocks],
        "meta": model.meta,
    }


def to_bytes(model: ModelSpec) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(_header(model), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(header)))
    buf.write(header)
    for name, data, fmt in _tensors(model):
        _write_tensor(buf, name, data, fmt)
    return buf.getvalue()


def from_bytes(blob: bytes) -> ModelSpec:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<HI", view, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 14
    header = json.loads(bytes(view[pos:pos + header_len]).decode())
    pos += header_len
    tensors = {}
    while pos < len(blob):
        name, data, fmt, pos = _read_tensor(view, pos)
        tensors[name] = (data, fmt)
    arch = ArchConfig.from_dict(header["arch"])
    sinc = SincLayerSpec(
        low_hz=np.array(header["sinc"]["low_hz"]), band_hz=np.array(header["sinc"]["band_hz"]),
        kernel_size=arch.sinc_kernel, sample_rate=arch.sample_rate, pool=arch.sinc_pool,
        bias=tensors["sinc.bias"][0], polarity=tensors["sinc.polarity"][0])
    if not np.array_equal(sinc.weight, tensors["sinc.weight"][0]):
        raise CheckpointError("stored sinc kernels do not match the cutoffs")
    blocks = []
    for i, b in enumerate(arch.blocks):
        blocks.append(ConvBlockSpec(
            weight=tensors[f"blocks.{i}.weight"][0], bias=tensors[f"blocks.{i}.bias"][0],
            groups=arch.groups(i), pool=b.pool, polarity=tensors[f"blocks.{i}.polarity"][0],
            raw_bias=tensors[f"blocks.{i}.raw_bias"][0],
            act_offset=np.array(header["act_offsets"][i])))
    fw, ffmt = tensors["fc.weight"]
    fb, bfmt = tensors["fc.bias"]
    return ModelSpec(arch=arch, sinc=sinc, blocks=blocks, fc_weight=QTensor(fw, ffmt),
                     fc_bias=QTensor(fb, bfmt), mapping=header["mapping"], meta=header["meta"])


def manifest(model: ModelSpec, blob: bytes) -> dict:
    return {
        "format": "kwsimc-checkpoint",
        "version": VERSION,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "architecture": model.arch.to_dict(),
        "architecture_note": ("layer widths, kernels and pools are an engineering reconstruction "
                              "sized to ~125K parameters; they are not published values"),
        "parameters": count_parameters(model.arch),
        "model_size_bits": model_size_bits(model.arch),
        "bias_mapping": model.mapping,
        "tensors": [{"name": n, "shape": list(np.shape(d)), "qformat": str(f) if f else "int"}
                    for n, d, f in _tensors(model)],
        "meta": model.meta,
    }


def save(model: ModelSpec, path) -> Path:
    """Write ``path`` and ``path.json``; returns the container path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = to_bytes(model)
    path.write_bytes(blob)
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(manifest(model, blob), indent=2, sort_keys=True) + "\n")
    return path


def load(path) -> ModelSpec:
    return from_bytes(Path(path).read_bytes())
