"""The (keys, values) datastore: one context vector and next token per corpus example.

File layout, little-endian, fixed 64-byte header::

    0   magic           b"DSTR"
    4   version         u32
    8   count           u64
    16  d_model         u32
    20  layer_fraction  f32
    24  model_hash      32 bytes (sha256 of the encoder's config and weights)
    56  split           u32  (0 train, 1 valid, 2 test)
    60  header_crc      u32  zlib.crc32 of bytes [0, 60)
    64  keys            count * d_model float32, row-major
    ..  values          count uint32
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import SPLITS, TokenizedCorpus
from .decoder_lm import DecoderLM, extract_keys
from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionMismatchError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
    VocabMismatchError,
)

MAGIC = b"DSTR"
VERSION = 1
HEADER = struct.Struct("<4sIQIf32sI")
HEADER_SIZE = 64
assert HEADER.size + 4 == HEADER_SIZE


def model_digest(model: DecoderLM) -> bytes:
    """sha256 over the model config and its float32 weights (stable across save/load)."""
    h = hashlib.sha256(json.dumps(model.cfg.to_dict(), sort_keys=True).encode())
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.digest()


@dataclass
class DatastoreMeta:
    split: str
    layer_fraction: float
    model_hash: bytes
    d_model: int
    count: int


@dataclass
class Datastore:
    keys: np.ndarray
    values: np.ndarray
    meta: DatastoreMeta

    def __post_init__(self) -> None:
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.keys.ndim != 2 or self.keys.shape[0] != len(self.values):
            raise DimensionMismatchError(
                f"keys shape {self.keys.shape} does not match {len(self.values)} values"
            )
        if self.meta.count != len(self.values) or self.meta.d_model != self.keys.shape[1]:
            raise DimensionMismatchError("datastore meta disagrees with array shapes")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def d_model(self) -> int:
        return self.meta.d_model

    def header_bytes(self) -> bytes:
        m = self.meta
        head = HEADER.pack(MAGIC, VERSION, m.count, m.d_model, m.layer_fraction,
                           m.model_hash.ljust(32, b"\0")[:32], SPLITS.index(m.split))
        return head + struct.pack("<I", zlib.crc32(head))

    def to_bytes(self) -> bytes:
        return (self.header_bytes() + self.keys.astype("<f4").tobytes()
                + self.values.astype("<u4").tobytes())

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)


def parse_header(raw: bytes, source: str = "<bytes>") -> DatastoreMeta:
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{source}: datastore header truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:4]!r}")
    (crc,) = struct.unpack_from("<I", raw, HEADER.size)
    if zlib.crc32(raw[:HEADER.size]) != crc:
        raise ChecksumError(f"{source}: datastore header checksum mismatch")
    _, version, count, d_model, frac, mhash, split = HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{source}: datastore version {version}, expected {VERSION}")
    if split >= len(SPLITS):
        raise FormatError(f"{source}: invalid split code {split}")
    return DatastoreMeta(SPLITS[split], float(frac), bytes(mhash), d_model, count)


def load_datastore(path: str | Path, expected_d_model: int | None = None) -> Datastore:
    raw = Path(path).read_bytes()
    meta = parse_header(raw, str(path))
    if expected_d_model is not None and meta.d_model != expected_d_model:
        raise DimensionMismatchError(f"{path}: d_model {meta.d_model}, expected {expected_d_model}")
    n_keys = meta.count * meta.d_model
    need = HEADER_SIZE + 4 * n_keys + 4 * meta.count
    if len(raw) != need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    keys = np.frombuffer(raw, dtype="<f4", count=n_keys, offset=HEADER_SIZE)
    values = np.frombuffer(raw, dtype="<u4", count=meta.count, offset=HEADER_SIZE + 4 * n_keys)
    return Datastore(keys.reshape(meta.count, meta.d_model).copy(), values.astype(np.int64), meta)


save_datastore = Datastore.save


def build_datastore(
    model: DecoderLM,
    corpus: TokenizedCorpus,
    split: str = "train",
    layer_fraction: float = 0.7,
    window_len: int | None = None,
    stride: int | None = None,
) -> Datastore:
    """One entry per example of ``split`` in corpus order, keyed by the chosen block's output."""
    if corpus.vocab.size != model.cfg.n_vocab:
        raise VocabMismatchError(f"corpus vocab {corpus.vocab.size} != model n_vocab {model.cfg.n_vocab}")
    keys, values = extract_keys(model, corpus, split, layer_fraction, window_len, stride)
    if not np.isfinite(keys).all():
        raise ValueError("non-finite key produced by the encoder")
    meta = DatastoreMeta(split, float(np.float32(layer_fraction)), model_digest(model),
                         model.cfg.d_model, len(values))
    return Datastore(keys, values, meta)


@dataclass
class DatastoreStats:
    count: int
    d_model: int
    key_bytes: int
    value_bytes: int
    header_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.key_bytes + self.value_bytes + self.header_bytes

    @property
    def bytes_per_token(self) -> float:
        return self.total_bytes / self.count if self.count else 0.0


def datastore_stats(ds: Datastore) -> DatastoreStats:
    return DatastoreStats(len(ds), ds.d_model, 4 * len(ds) * ds.d_model, 4 * len(ds), HEADER_SIZE)
