"""Checkpoint container shared by the decoder LM and the MLP memory.

Layout (little-endian)::

    magic        4 bytes   b"LMCK" (decoder) or b"MMCK" (memory)
    version      u32
    header_len   u32
    header_crc   u32       zlib.crc32 of the header bytes
    header       JSON text: {"kind", "config", "params": [[name, shape], ...]}
    body         float32 parameters, concatenated in the order listed in the header,
                 each tensor row-major

Tied parameters are stored once (``Module.named_parameters`` deduplicates them).
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

VERSION = 1
_PREFIX = struct.Struct("<4sIII")


def save_checkpoint(module: nn.Module, config: dict[str, Any], path: str | Path, magic: bytes) -> None:
    params = list(module.named_parameters())
    header = json.dumps(
        {
            "config": config,
            "params": [[name, list(p.shape)] for name, p in params],
        },
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(magic, VERSION, len(header), zlib.crc32(header)))
        f.write(header)
        for _, p in params:
            f.write(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    tmp.replace(path)


def read_checkpoint(path: str | Path, magic: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise TruncatedFileError(f"{path}: shorter than checkpoint prefix")
    got_magic, version, header_len, header_crc = _PREFIX.unpack_from(raw)
    if got_magic != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {got_magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    end = _PREFIX.size + header_len
    if len(raw) < end:
        raise TruncatedFileError(f"{path}: header truncated")
    header = raw[_PREFIX.size:end]
    if zlib.crc32(header) != header_crc:
        raise ChecksumError(f"{path}: header checksum mismatch")
    meta = json.loads(header.decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    pos = end
    for name, shape in meta["params"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if pos + nbytes > len(raw):
            raise TruncatedFileError(f"{path}: parameter {name} truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise TruncatedFileError(f"{path}: {len(raw) - pos} trailing bytes")
    return meta["config"], tensors


def load_into(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    named = dict(module.named_parameters())
    if set(named) != set(tensors):
        raise ConfigMismatchError("checkpoint parameters do not match the module layout")
    with torch.no_grad():
        for name, p in named.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigMismatchError(f"{name}: shape {arr.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))


def file_digest(path: str | Path) -> bytes:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.digest()
