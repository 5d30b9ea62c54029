"""Model checkpoint files.

Layout (little-endian)::

    magic     8 bytes  b"HTCNCKP1"
    version   u32
    meta_len  u32      then meta_len bytes of canonical JSON
                       {"model": ModelConfig, "extra": {...}}
    n_tensors u32
    per tensor: u16 name length, UTF-8 name, u8 dtype code (0 = f32, 1 = f64),
                u8 ndim, ndim x u64 dims, raw values

Tensor names carry a section prefix: ``param/``, ``buffer/``, ``adam.m/``
and ``adam.v/``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .models import Model, ModelConfig
from .primitives import AdamState

MAGIC = b"HTCNCKP1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, model: Model, adam: AdamState | None = None, extra: dict | None = None) -> Path:
    extra = dict(extra or {})
    tensors = [(f"param/{k}", v) for k, v in sorted(model.params.items())]
    tensors += [(f"buffer/{k}", v) for k, v in sorted(model.buffers.items())]
    if adam is not None:
        extra["adam_t"] = adam.t
        tensors += [(f"adam.m/{k}", v) for k, v in sorted(adam.m.items())]
        tensors += [(f"adam.v/{k}", v) for k, v in sorted(adam.v.items())]
    meta = canonical_json({"model": model.config.to_dict(), "extra": extra}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)
    return path


def _read(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint is truncated")
    return b


def load_checkpoint(path):
    """Returns (model, adam state or None, extra dict)."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with fh:
        if _read(fh, 8) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, meta_len = struct.unpack("<II", _read(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(_read(fh, meta_len))
        (n,) = struct.unpack("<I", _read(fh, 4))
        sections = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
        for _ in range(n):
            (ln,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, ln).decode()
            code, ndim = struct.unpack("<BB", _read(fh, 2))
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim))
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read(fh, count * dt.itemsize), dtype=dt).reshape(shape)
            sec, _, key = name.partition("/")
            if sec not in sections:
                raise CheckpointError(f"tensor {name}: unknown section")
            sections[sec][key] = arr.astype(dt.newbyteorder("="), copy=True)
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last tensor")
    config = ModelConfig.from_dict(meta["model"])
    model = Model(config, sections["param"], sections["buffer"])
    extra = meta.get("extra", {})
    adam = None
    if "adam_t" in extra:
        adam = AdamState(sections["adam.m"], sections["adam.v"], int(extra["adam_t"]))
    return model, adam, extra
