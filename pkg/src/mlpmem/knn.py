"""Exact nearest-neighbour search and kNN next-token distributions.

Search is a flat scan. Candidates are shortlisted with float32 expanded
distances (``|k|^2 - 2 q.k + |q|^2``), then reranked with float64 squared L2
computed directly from the float32 vectors. A per-row error bound on the
shortlist triggers a full exact rescan whenever rounding could have dropped a
true neighbour, so results are exact and ordered by (distance, index).
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import TokenizedCorpus
from .datastore import Datastore, model_digest
from .decoder_lm import DecoderLM, forward, layer_index
from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionMismatchError,
    ProvenanceError,
    TruncatedFileError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

_SHORTLIST_MARGIN = 16
_F32_EPS = float(np.finfo(np.float32).eps)


@dataclass
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray
    values: np.ndarray
    k: int
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def entries(self) -> list[tuple[int, float, int]]:
        return [(int(i), float(d), int(v)) for i, d, v in zip(self.indices, self.distances, self.values)]


@dataclass
class SparseDistribution:
    tokens: np.ndarray
    probs: np.ndarray
    vocab_size: int

    @property
    def pairs(self) -> list[tuple[int, float]]:
        return [(int(t), float(p)) for t, p in zip(self.tokens, self.probs)]

    def __len__(self) -> int:
        return len(self.tokens)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.vocab_size, dtype=np.float64)
        out[self.tokens] = self.probs
        return out

    def prob(self, token: int) -> float:
        hit = np.nonzero(self.tokens == token)[0]
        return float(self.probs[hit[0]]) if hit.size else 0.0


class BruteForceIndex:
    def __init__(self, keys: np.ndarray, query_block_elems: int = 1 << 25) -> None:
        self.keys = np.ascontiguousarray(keys, dtype=np.float32)
        self._keys_t = torch.from_numpy(self.keys)
        self._sq = (self._keys_t.double() ** 2).sum(1)
        self._sq32 = self._sq.float()
        self._max_sq = float(self._sq.max()) if len(self.keys) else 0.0
        self.block = max(1, query_block_elems // max(1, len(self.keys)))

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def _exact_rows(self, q: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        qd = q.double()
        dot = torch.bmm(self._keys_t[idx].double(), qd[:, :, None])[..., 0]
        return self._sq[idx] + (qd * qd).sum(1, keepdim=True) - 2.0 * dot

    def search(
        self, queries: np.ndarray, k: int, exclude: Sequence[int] | np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray, bool]:
        """Top-``k`` for each query row: ``(indices, distances, truncated)``.

        ``exclude[i]`` (or -1) removes one datastore entry from row ``i``'s
        candidates. ``truncated`` is set when fewer than ``k`` entries remain.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q_all = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)
        if q_all.shape[1] != self.dim:
            raise DimensionMismatchError(f"query width {q_all.shape[1]} != datastore d_model {self.dim}")
        n, nq = len(self), len(q_all)
        excl = None if exclude is None else np.asarray(exclude, dtype=np.int64).reshape(nq)
        available = n - (1 if excl is not None and (excl >= 0).any() else 0)
        k_eff = min(k, available)
        truncated = k_eff < k
        if k_eff <= 0:
            return np.zeros((nq, 0), np.int64), np.zeros((nq, 0)), True
        m = min(n, k_eff + _SHORTLIST_MARGIN + (1 if excl is not None else 0))
        out_i = np.empty((nq, k_eff), dtype=np.int64)
        out_d = np.empty((nq, k_eff), dtype=np.float64)
        for s in range(0, nq, self.block):
            q = torch.from_numpy(q_all[s:s + self.block])
            qsq = (q.double() ** 2).sum(1)
            approx = torch.addmm(self._sq32[None, :], q, self._keys_t.T, beta=1.0, alpha=-2.0)
            approx += qsq.float()[:, None]
            rows = torch.arange(len(q))
            ex = None
            if excl is not None:
                ex = torch.from_numpy(excl[s:s + self.block])
                valid = ex >= 0
                approx[rows[valid], ex[valid]] = float("inf")
            cand_d, cand_i = torch.topk(approx, m, dim=1, largest=False, sorted=True)
            exact = self._exact_rows(q, cand_i)
            if ex is not None:
                exact[cand_i == ex[:, None]] = float("inf")
            idx, dist = _order(cand_i, exact, k_eff)
            # rounding guard: everything outside the shortlist has approx >= the last shortlisted value
            if m < n:
                bound = 4.0 * self.dim * _F32_EPS * (qsq + self._max_sq) + 1e-30
                unsafe = dist[:, -1] >= cand_d[:, -1].double() - 2.0 * bound
                for r in torch.nonzero(unsafe).flatten().tolist():
                    # any true top-k key has approx <= (k-th exact) + bound; rescan only those
                    near = torch.nonzero(approx[r].double() <= dist[r, -1] + 2.0 * bound[r]).flatten()[None, :]
                    full = self._exact_rows(q[r:r + 1], near)
                    if ex is not None and ex[r] >= 0:
                        full[near == ex[r]] = float("inf")
                    ri, rd = _order(near, full, k_eff)
                    idx[r], dist[r] = ri[0], rd[0]
            out_i[s:s + len(q)] = idx.numpy()
            out_d[s:s + len(q)] = dist.numpy()
        return out_i, out_d, truncated


def _order(idx: torch.Tensor, dist: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Sort each row by (distance, index) and keep the first ``k``."""
    by_idx = torch.argsort(idx, dim=1)
    idx = idx.gather(1, by_idx)
    dist = dist.gather(1, by_idx)
    by_dist = torch.sort(dist, dim=1, stable=True).indices
    return idx.gather(1, by_dist)[:, :k], dist.gather(1, by_dist)[:, :k]


def _index_for(ds: Datastore) -> BruteForceIndex:
    idx = getattr(ds, "_index", None)
    if idx is None:
        idx = BruteForceIndex(ds.keys)
        ds._index = idx  # type: ignore[attr-defined]
    return idx


def knn_search(ds: Datastore, query: np.ndarray, k: int, exclude_index: int | None = None) -> NeighborSet:
    query = np.asarray(query, dtype=np.float32)
    if query.shape != (ds.d_model,):
        raise DimensionMismatchError(f"query shape {query.shape} != ({ds.d_model},)")
    excl = None if exclude_index is None else [exclude_index]
    idx, dist, truncated = _index_for(ds).search(query[None, :], k, excl)
    if truncated:
        logger.debug("knn_search: k=%d exceeds %d available entries", k, idx.shape[1])
    return NeighborSet(idx[0], dist[0], ds.values[idx[0]], k, truncated)


def knn_distribution_from(distances: np.ndarray, values: np.ndarray, vocab_size: int) -> SparseDistribution:
    """Softmax over negative distances, mass accumulated per distinct value."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0:
        raise ValueError("cannot build a kNN distribution from zero neighbours")
    w = np.exp(-(distances - distances.min()))
    tokens, inverse = np.unique(np.asarray(values, dtype=np.int64), return_inverse=True)
    mass = np.bincount(inverse, weights=w, minlength=len(tokens))
    keep = mass > 0.0  # entries whose weight underflowed carry no representable mass
    tokens, mass = tokens[keep], mass[keep]
    if tokens.size and tokens[-1] >= vocab_size:
        raise ValueError("neighbour value outside the vocabulary")
    return SparseDistribution(tokens, mass / mass.sum(), vocab_size)


def knn_distribution(neighbors: NeighborSet, vocab_size: int) -> SparseDistribution:
    return knn_distribution_from(neighbors.distances, neighbors.values, vocab_size)


def interpolate(p_aux: np.ndarray, p_lm: np.ndarray, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * np.asarray(p_aux, dtype=np.float64) + (1.0 - lam) * np.asarray(p_lm, dtype=np.float64)


def knn_lm_probability(ds: Datastore, model: DecoderLM, context: Sequence[int], k: int, lam: float) -> np.ndarray:
    """Dense ``lam * p_kNN + (1 - lam) * p_LM`` for the token after ``context``."""
    out, hidden = forward(model, context)
    layer = layer_index(ds.meta.layer_fraction, model.cfg.n_layer)
    nb = knn_search(ds, hidden[layer - 1].vector, k)
    p_knn = knn_distribution(nb, model.cfg.n_vocab).to_dense()
    return interpolate(p_knn, out.p_lm, lam)


def knn_target_probs(
    index: BruteForceIndex,
    values: np.ndarray,
    queries: np.ndarray,
    targets: np.ndarray,
    ks: Iterable[int],
    batch: int = 2048,
) -> dict[int, np.ndarray]:
    """p_kNN(target) for every query at several k, from one top-max(k) search."""
    ks = sorted(set(int(k) for k in ks))
    kmax = min(ks[-1], len(index))
    out = {k: np.empty(len(queries), dtype=np.float64) for k in ks}
    for s in range(0, len(queries), batch):
        idx, dist, _ = index.search(queries[s:s + batch], kmax)
        w = np.exp(-(dist - dist[:, :1]))
        hit = values[idx] == targets[s:s + batch, None]
        num = np.cumsum(w * hit, axis=1)
        den = np.cumsum(w, axis=1)
        for k in ks:
            c = min(k, kmax) - 1
            out[k][s:s + batch] = num[:, c] / den[:, c]
    return out


# ---------------------------------------------------------------------------
# target file

TARGET_MAGIC = b"KNNT"
TARGET_VERSION = 1
_THEAD = struct.Struct("<4sIIQI32s")
TARGET_HEADER_SIZE = 64
_REC = struct.Struct("<QII")


@dataclass
class TargetMeta:
    k: int
    count: int
    vocab_size: int
    datastore_hash: bytes

    def to_bytes(self) -> bytes:
        head = _THEAD.pack(TARGET_MAGIC, TARGET_VERSION, self.k, self.count, self.vocab_size,
                           self.datastore_hash.ljust(32, b"\0")[:32])
        head += struct.pack("<I", zlib.crc32(head))
        return head.ljust(TARGET_HEADER_SIZE, b"\0")


def _parse_target_header(raw: bytes, source: str) -> TargetMeta:
    if len(raw) < TARGET_HEADER_SIZE:
        raise TruncatedFileError(f"{source}: target header truncated")
    if raw[:4] != TARGET_MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:4]!r}")
    (crc,) = struct.unpack_from("<I", raw, _THEAD.size)
    if zlib.crc32(raw[:_THEAD.size]) != crc:
        raise ChecksumError(f"{source}: target header checksum mismatch")
    _, version, k, count, vocab, dhash = _THEAD.unpack_from(raw)
    if version != TARGET_VERSION:
        raise VersionMismatchError(f"{source}: target version {version}, expected {TARGET_VERSION}")
    return TargetMeta(k, count, vocab, bytes(dhash))


def encode_record(example: int, ground_truth: int, dist: SparseDistribution) -> bytes:
    pairs = np.empty(len(dist), dtype=[("tok", "<u4"), ("p", "<f4")])
    pairs["tok"] = dist.tokens
    pairs["p"] = dist.probs
    return _REC.pack(example, ground_truth, len(dist)) + pairs.tobytes()


@dataclass
class KnnTargets:
    """Target records in CSR form: row ``i`` holds ``tokens[offsets[i]:offsets[i+1]]``."""

    meta: TargetMeta
    example_index: np.ndarray
    ground_truth: np.ndarray
    offsets: np.ndarray
    tokens: np.ndarray
    probs: np.ndarray

    def __len__(self) -> int:
        return len(self.example_index)

    def record(self, i: int) -> SparseDistribution:
        a, b = self.offsets[i], self.offsets[i + 1]
        return SparseDistribution(self.tokens[a:b].astype(np.int64), self.probs[a:b].astype(np.float64),
                                  self.meta.vocab_size)

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(tokens, probs)`` arrays of width max-support, zero-padded."""
        sizes = np.diff(self.offsets)
        width = max(1, int(sizes.max()) if len(sizes) else 1)
        tok = np.zeros((len(self), width), dtype=np.int64)
        prob = np.zeros((len(self), width), dtype=np.float32)
        col = np.arange(len(self.tokens)) - np.repeat(self.offsets[:-1], sizes)
        row = np.repeat(np.arange(len(self)), sizes)
        tok[row, col] = self.tokens
        prob[row, col] = self.probs
        return tok, prob


def _scan_records(raw: bytes, start: int, source: str, strict: bool) -> tuple[list[int], int]:
    """Offsets of complete records from ``start``; returns (record starts, end of last complete)."""
    starts, pos = [], start
    while pos < len(raw):
        if pos + _REC.size > len(raw):
            break
        _, _, support = _REC.unpack_from(raw, pos)
        end = pos + _REC.size + 8 * support
        if end > len(raw):
            break
        starts.append(pos)
        pos = end
    if strict and pos != len(raw):
        raise TruncatedFileError(f"{source}: partial record at byte {pos}")
    return starts, pos


def read_targets(path: str | Path) -> KnnTargets:
    raw = Path(path).read_bytes()
    meta = _parse_target_header(raw, str(path))
    starts, _ = _scan_records(raw, TARGET_HEADER_SIZE, str(path), strict=True)
    if len(starts) != meta.count:
        raise TruncatedFileError(f"{path}: {len(starts)} records, header promises {meta.count}")
    n = len(starts)
    ex = np.empty(n, np.int64)
    gt = np.empty(n, np.int64)
    sizes = np.empty(n, np.int64)
    for i, s in enumerate(starts):
        ex[i], gt[i], sizes[i] = _REC.unpack_from(raw, s)
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(sizes, out=offsets[1:])
    pair_t = np.dtype([("tok", "<u4"), ("p", "<f4")])
    tokens = np.empty(offsets[-1], np.int64)
    probs = np.empty(offsets[-1], np.float32)
    for i, s in enumerate(starts):
        arr = np.frombuffer(raw, dtype=pair_t, count=sizes[i], offset=s + _REC.size)
        tokens[offsets[i]:offsets[i + 1]] = arr["tok"]
        probs[offsets[i]:offsets[i + 1]] = arr["p"]
    return KnnTargets(meta, ex, gt, offsets, tokens, probs)


class TargetWriter:
    """Append-only writer; reopening an interrupted file resumes after the last complete record."""

    def __init__(self, path: str | Path, meta: TargetMeta, resume: bool = True) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.next_index = 0
        if resume and self.path.exists():
            raw = self.path.read_bytes()
            try:
                existing = _parse_target_header(raw, str(self.path))
            except (TruncatedFileError, BadMagicError, ChecksumError):
                existing = None
            if existing == meta:
                starts, end = _scan_records(raw, TARGET_HEADER_SIZE, str(self.path), strict=False)
                self.next_index = len(starts)
                with open(self.path, "r+b") as f:
                    f.truncate(end)
                self._f = open(self.path, "ab")
                return
        self._f = open(self.path, "wb")
        self._f.write(meta.to_bytes())

    def write(self, example: int, ground_truth: int, dist: SparseDistribution) -> None:
        if example != self.next_index:
            raise ValueError(f"records must be written in order: expected {self.next_index}, got {example}")
        self._f.write(encode_record(example, ground_truth, dist))
        self.next_index += 1

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "TargetWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def check_provenance(ds: Datastore, model: DecoderLM, corpus: TokenizedCorpus | None = None,
                     split: str = "train") -> None:
    if model_digest(model) != ds.meta.model_hash:
        raise ProvenanceError("datastore was built with a different model")
    if ds.d_model != model.cfg.d_model:
        raise DimensionMismatchError(f"datastore d_model {ds.d_model} != model d_model {model.cfg.d_model}")
    if corpus is not None:
        if ds.meta.split != split or len(ds) != corpus.num_examples(split):
            raise ProvenanceError(f"datastore does not cover the {split} split of this corpus")
        if not np.array_equal(ds.values, corpus.split(split)[1:]):
            raise ProvenanceError("datastore values differ from the corpus targets")


def precompute_targets(
    ds: Datastore,
    model: DecoderLM,
    corpus: TokenizedCorpus,
    k: int,
    out: str | Path,
    split: str = "train",
    queries: np.ndarray | None = None,
    batch: int = 1024,
    resume: bool = True,
) -> TargetMeta:
    """Write one self-excluded kNN target per example of ``split`` to ``out``.

    Example ``t`` queries with its own key and drops datastore entry ``t``;
    the top ``k - 1`` survivors form the target distribution. ``queries``
    defaults to the datastore keys, which are exactly ``f(c_t)``.
    """
    if k < 2:
        raise ValueError("k must be >= 2: one neighbour is the excluded self-entry")
    check_provenance(ds, model, corpus, split)
    queries = ds.keys if queries is None else np.asarray(queries, dtype=np.float32)
    if queries.shape != ds.keys.shape:
        raise DimensionMismatchError("one query per datastore entry is required")
    meta = TargetMeta(k, len(ds), model.cfg.n_vocab, ds.digest())
    index = _index_for(ds)
    n = len(ds)
    with TargetWriter(out, meta, resume=resume) as w:
        for s in range(w.next_index, n, batch):
            e = min(s + batch, n)
            idx, dist, _ = index.search(queries[s:e], k - 1, exclude=np.arange(s, e))
            for r in range(e - s):
                t = s + r
                w.write(t, int(ds.values[t]), knn_distribution_from(dist[r], ds.values[idx[r]], meta.vocab_size))
            logger.info("precompute-knn %d/%d", e, n)
    return meta
