"""Vocabulary construction, tokenization and the on-disk token stream.

Two schemes are supported: whitespace ``word`` tokens (default, with a
frequency cutoff that maps rare words to ``<unk>``) and ``char`` tokens.
Splits are contiguous regions of the token stream in train/valid/test order.
"""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import BadMagicError, TruncatedFileError, VocabMismatchError

UNK = "<unk>"
SPLITS = ("train", "valid", "test")

TOKENS_MAGIC = b"TOKS"
_TOKENS_HEADER = struct.Struct("<4sIQQQ")


@dataclass
class Vocabulary:
    id_to_token: list[str]
    scheme: str = "word"
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary tokens must be distinct")
        if UNK not in self.token_to_id:
            raise ValueError(f"vocabulary must contain {UNK}")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def save(self, path: str | Path) -> None:
        # line number == id; the scheme goes in a sidecar so the file stays one token per line
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.id_to_token:
                f.write(_escape(tok) + "\n")
        path.with_suffix(path.suffix + ".scheme").write_text(self.scheme + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        scheme_file = path.with_suffix(path.suffix + ".scheme")
        scheme = scheme_file.read_text().strip() if scheme_file.exists() else "word"
        return cls([_unescape(line) for line in lines], scheme=scheme)


def _escape(tok: str) -> str:
    return tok.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(line: str) -> str:
    out, i = [], 0
    while i < len(line):
        c = line[i]
        if c == "\\" and i + 1 < len(line):
            nxt = line[i + 1]
            out.append({"n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def split_units(text: str, scheme: str) -> list[str]:
    if scheme == "word":
        return text.split()
    if scheme == "char":
        return list(text)
    raise ValueError(f"unknown tokenization scheme {scheme!r}")


def build_vocab(text: str, scheme: str = "word", min_freq: int = 1) -> Vocabulary:
    """Build a deterministic vocabulary from ``text``.

    Ids are assigned by descending frequency, ties broken lexicographically;
    ``<unk>`` comes last. Units seen fewer than ``min_freq`` times are left out
    and will tokenize to ``<unk>``.
    """
    if not text:
        raise ValueError("cannot build a vocabulary from empty text")
    counts = Counter(split_units(text, scheme))
    if not counts:
        raise ValueError("text contains no tokens")
    kept = [t for t, c in counts.items() if c >= min_freq and t != UNK]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept + [UNK], scheme=scheme)


def tokenize(text: str, vocab: Vocabulary) -> np.ndarray:
    unk = vocab.unk_id
    lookup = vocab.token_to_id
    ids = [lookup.get(u, unk) for u in split_units(text, vocab.scheme)]
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    toks = [vocab.id_to_token[int(i)] for i in ids]
    return " ".join(toks) if vocab.scheme == "word" else "".join(toks)


@dataclass
class TokenizedCorpus:
    vocab: Vocabulary
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    window_len: int = 128

    def __post_init__(self) -> None:
        for name in SPLITS:
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= self.vocab.size):
                raise VocabMismatchError(f"{name} split has ids outside [0, {self.vocab.size})")
            setattr(self, name, arr)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def num_examples(self, name: str) -> int:
        return max(len(self.split(name)) - 1, 0)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.vocab.save(directory / "vocab.txt")
        save_token_stream(directory / "tokens.bin", self.vocab.size, self.train, self.valid, self.test)

    @classmethod
    def load(cls, directory: str | Path, window_len: int = 128) -> "TokenizedCorpus":
        directory = Path(directory)
        vocab = Vocabulary.load(directory / "vocab.txt")
        n_vocab, splits = load_token_stream(directory / "tokens.bin")
        if n_vocab != vocab.size:
            raise VocabMismatchError(f"token stream n_vocab={n_vocab} but vocab file has {vocab.size}")
        return cls(vocab, *splits, window_len=window_len)


def save_token_stream(path: str | Path, n_vocab: int, *splits: np.ndarray) -> None:
    lengths = [len(s) for s in splits]
    with open(path, "wb") as f:
        f.write(_TOKENS_HEADER.pack(TOKENS_MAGIC, n_vocab, *lengths))
        for s in splits:
            f.write(np.asarray(s, dtype="<u4").tobytes())


def load_token_stream(path: str | Path) -> tuple[int, list[np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _TOKENS_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, n_vocab, *lengths = _TOKENS_HEADER.unpack_from(raw)
    if magic != TOKENS_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    expected = _TOKENS_HEADER.size + 4 * sum(lengths)
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<u4", offset=_TOKENS_HEADER.size)
    out, pos = [], 0
    for n in lengths:
        out.append(body[pos:pos + n].astype(np.int64))
        pos += n
    return n_vocab, out


def make_corpus(
    text: str,
    scheme: str = "word",
    min_freq: int = 1,
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05),
    window_len: int = 128,
) -> TokenizedCorpus:
    vocab = build_vocab(text, scheme, min_freq)
    ids = tokenize(text, vocab)
    n = len(ids)
    n_train = int(round(n * ratios[0]))
    n_valid = int(round(n * ratios[1]))
    return TokenizedCorpus(
        vocab, ids[:n_train], ids[n_train:n_train + n_valid], ids[n_train + n_valid:], window_len
    )


def read_texts(paths: Sequence[str | Path]) -> str:
    """Concatenate UTF-8 files in argument order."""
    parts = [Path(p).read_text(encoding="utf-8") for p in paths]
    return "\n".join(parts)


def iter_examples(corpus: TokenizedCorpus, split: str) -> Iterator[tuple[np.ndarray, int]]:
    """Yield ``(context, target)`` for every position with at least one token of context."""
    ids = corpus.split(split)
    n_ctx = corpus.window_len
    for t in range(1, len(ids)):
        yield ids[max(0, t - n_ctx):t], int(ids[t])
