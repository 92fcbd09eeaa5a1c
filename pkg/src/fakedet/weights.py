"""Binary weight files ("FDWT" format).

Layout: magic ``FDWT`` | u16 version | u16 flags | u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 dtype code, u8 rank, rank x u32 dims,
row-major payload. The file ends with a CRC-32 (u32) of all preceding bytes.
All integers little-endian. A JSON config rides along as a raw-bytes tensor
named ``__config__`` (dtype code 255); dtype 0 is float32, 1 is float64.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import BackboneConfig, FakeImageDetector, assemble, freeze_backbone

MAGIC = b"FDWT"
VERSION = 1
CONFIG_NAME = "__config__"

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_RAW_CODE = 255


def save_bundle(path, config: dict, tensors):
    """Write a config dict plus named arrays; order is preserved."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<HHI", VERSION, 0, len(tensors) + 1)

    payload = json.dumps(config, sort_keys=True).encode()
    _append_tensor(buf, CONFIG_NAME, _RAW_CODE, (len(payload),), payload)
    seen = {CONFIG_NAME}
    for name, arr in tensors:
        if name in seen:
            raise ConfigError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(arr)
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise ConfigError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        _append_tensor(buf, name, code, arr.shape, arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def _append_tensor(buf, name, code, dims, payload):
    encoded = name.encode()
    buf += struct.pack("<H", len(encoded))
    buf += encoded
    buf += struct.pack("<BB", code, len(dims))
    for d in dims:
        buf += struct.pack("<I", d)
    buf += payload


def load_bundle(path):
    """Read back (config, {name: array}); validates structure and CRC."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", offset=0)
    if len(data) < 12 + 4:
        raise FormatError("file too short for header and checksum", offset=len(data))
    version, _flags, count = struct.unpack_from("<HHI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    actual_crc = zlib.crc32(data[: len(data) - 4])
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=len(data) - 4,
        )

    pos = 12
    end = len(data) - 4
    config = None
    tensors = {}
    for _ in range(count):
        start = pos
        if pos + 2 > end:
            raise FormatError("truncated tensor header", offset=pos)
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + name_len + 2 > end:
            raise FormatError("truncated tensor name", offset=pos)
        name = data[pos : pos + name_len].decode()
        pos += name_len
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if pos + 4 * rank > end:
            raise FormatError(f"truncated dims of tensor {name!r}", offset=pos)
        dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
        pos += 4 * rank
        if code == _RAW_CODE:
            nbytes = int(np.prod(dims, dtype=np.int64)) if dims else 0
        elif code in _CODE_DTYPES:
            nbytes = int(np.prod(dims, dtype=np.int64)) * _CODE_DTYPES[code].itemsize
        else:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}", offset=start)
        if pos + nbytes > end:
            raise FormatError(f"truncated payload of tensor {name!r}", offset=pos)
        payload = data[pos : pos + nbytes]
        pos += nbytes

        if name == CONFIG_NAME:
            if config is not None:
                raise FormatError("duplicate config tensor", offset=start)
            config = json.loads(payload.decode())
        else:
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}", offset=start)
            tensors[name] = np.frombuffer(payload, dtype=_CODE_DTYPES[code]).reshape(dims).copy()
    if pos != end:
        raise FormatError(f"{end - pos} trailing bytes after last tensor", offset=pos)
    if config is None:
        raise FormatError("missing config tensor", offset=12)
    return config, tensors


# -- model-level (de)serialization ----------------------------------------------


def _detector_config(model: FakeImageDetector):
    cfg = model.cfg
    return {
        "kind": "detector",
        "stages": cfg.stages,
        "n_blocks": cfg.n_blocks,
        "bottleneck": cfg.bottleneck,
        "backbone_widths": list(cfg.backbone.widths),
        "backbone_strides": list(cfg.backbone.strides),
        "head_init": cfg.head_init,
        "bn_eps": cfg.bn_eps,
        "bn_momentum": cfg.bn_momentum,
        "attention_branch": cfg.attention_branch,
        "precision": cfg.precision,
        "backbone_frozen": model.backbone_frozen,
        "non_trainable": sorted(p.name for p in model.parameters() if not p.trainable),
    }


def save_model(model: FakeImageDetector, path):
    save_bundle(path, _detector_config(model), [(p.name, p.value) for p in model.parameters()])


def load_model(path) -> FakeImageDetector:
    config, tensors = load_bundle(path)
    if config.get("kind") != "detector":
        raise FormatError(f"expected a detector weight file, found kind {config.get('kind')!r}")
    model = assemble(
        stages=config["stages"],
        n_blocks=config["n_blocks"],
        seed=0,
        precision=config["precision"],
        bottleneck=config["bottleneck"],
        backbone_cfg=BackboneConfig(tuple(config["backbone_widths"]), tuple(config["backbone_strides"])),
        head_init=config["head_init"],
        attention_branch=config["attention_branch"],
        bn_eps=config["bn_eps"],
        bn_momentum=config["bn_momentum"],
    )
    _fill_parameters(model.param_map(), tensors)
    non_trainable = set(config["non_trainable"])
    for p in model.parameters():
        p.trainable = p.name not in non_trainable
    model.backbone_frozen = bool(config["backbone_frozen"])
    return model


def save_backbone(model, path):
    """Backbone weights only, enough to rebuild and freeze it later.

    Works for anything carrying a ``backbone`` (the detector or the
    pretraining net); the throwaway head is deliberately not saved.
    """
    backbone = model.backbone
    config = {
        "kind": "toy_backbone",
        "backbone_widths": list(backbone.cfg.widths),
        "backbone_strides": list(backbone.cfg.strides),
        "bn_eps": backbone.bn_eps,
        "bn_momentum": backbone.bn_momentum,
        "precision": model.precision,
    }
    save_bundle(path, config, [(p.name, p.value) for p in backbone.parameters()])


def assemble_from_backbone(
    path,
    stages=3,
    n_blocks=4,
    seed=0,
    bottleneck=8,
    head_init="zeros",
    attention_branch=True,
):
    """Build a detector around stored backbone weights, frozen."""
    config, tensors = load_bundle(path)
    if config.get("kind") != "toy_backbone":
        raise FormatError(f"expected a backbone weight file, found kind {config.get('kind')!r}")
    model = assemble(
        stages=stages,
        n_blocks=n_blocks,
        seed=seed,
        precision=config["precision"],
        bottleneck=bottleneck,
        backbone_cfg=BackboneConfig(tuple(config["backbone_widths"]), tuple(config["backbone_strides"])),
        head_init=head_init,
        attention_branch=attention_branch,
        bn_eps=config["bn_eps"],
        bn_momentum=config["bn_momentum"],
    )
    _fill_parameters({p.name: p for p in model.backbone_parameters()}, tensors)
    freeze_backbone(model, True)
    return model


def _fill_parameters(by_name, tensors):
    missing = sorted(set(by_name) - set(tensors))
    if missing:
        raise FormatError(f"weight file lacks tensors: {', '.join(missing)}")
    extra = sorted(set(tensors) - set(by_name))
    if extra:
        raise FormatError(f"weight file has unexpected tensors: {', '.join(extra)}")
    for name, p in by_name.items():
        arr = tensors[name]
        if arr.shape != p.value.shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {p.value.shape}")
        p.value = np.ascontiguousarray(arr, dtype=p.value.dtype)
        p.grad = np.zeros_like(p.value)
