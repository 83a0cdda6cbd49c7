from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlpmem.corpus import (
    UNK,
    TokenizedCorpus,
    Vocabulary,
    build_vocab,
    detokenize,
    iter_examples,
    load_token_stream,
    make_corpus,
    save_token_stream,
    tokenize,
)
from mlpmem.errors import BadMagicError, TruncatedFileError, VocabMismatchError


def test_char_vocab_enumerates_distinct_chars():
    v = build_vocab("abab", "char")
    assert v.id_to_token == ["a", "b", UNK]
    assert v.size == 3


def test_word_vocab_two_tokens_plus_unk():
    v = build_vocab("a b a", "word")
    assert v.size == 3 and v.id_to_token[-1] == UNK
    assert v.token_to_id["a"] == 0  # most frequent first


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        build_vocab("", "word")
    with pytest.raises(ValueError):
        build_vocab("   \n", "word")


def test_tokenize_known_and_unknown():
    v = build_vocab("ab", "char")
    assert tokenize("ab", v).tolist() == [0, 1]
    assert tokenize("abz", v).tolist() == [0, 1, v.unk_id]


def test_min_freq_maps_rare_words_to_unk():
    v = build_vocab("x x x y", "word", min_freq=2)
    assert "y" not in v.token_to_id
    assert tokenize("y x", v).tolist() == [v.unk_id, v.token_to_id["x"]]


def test_vocab_file_is_byte_identical_across_builds(tmp_path):
    text = "the cat sat on the mat\nthe end"
    build_vocab(text).save(tmp_path / "a.txt")
    build_vocab(text).save(tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert (tmp_path / "a.txt").read_text().splitlines()[0] == "the"


def test_vocab_save_load_escapes_control_chars(tmp_path):
    v = build_vocab("a\nb\\c\r", "char")
    v.save(tmp_path / "v.txt")
    w = Vocabulary.load(tmp_path / "v.txt")
    assert w.id_to_token == v.id_to_token and w.scheme == "char"
    assert len((tmp_path / "v.txt").read_text().split("\n")) == v.size + 1


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcdef \n", min_size=1, max_size=60))
def test_char_round_trip(text):
    v = build_vocab(text, "char")
    assert detokenize(tokenize(text, v), v) == text


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["red", "green", "blue", "x", "y"]), min_size=1, max_size=40))
def test_word_round_trip_and_determinism(words):
    text = " ".join(words)
    v = build_vocab(text, "word")
    assert detokenize(tokenize(text, v), v) == text
    assert build_vocab(text, "word").id_to_token == v.id_to_token


def test_iter_examples_counts_and_targets():
    c = make_corpus(" ".join(str(i % 7) for i in range(200)), window_len=8)
    ids = c.split("train")
    ex = list(iter_examples(c, "train"))
    assert len(ex) == len(ids) - 1 == c.num_examples("train")
    assert len(ex[0][0]) == 1
    for t, (ctx, tgt) in enumerate(ex, start=1):
        assert tgt == ids[t]
        assert len(ctx) == min(t, 8)
        assert np.array_equal(ctx, ids[max(0, t - 8):t])


def test_splits_are_contiguous_and_cover_the_stream():
    text = " ".join(f"w{i % 13}" for i in range(1000))
    c = make_corpus(text, ratios=(0.8, 0.1, 0.1))
    full = tokenize(text, c.vocab)
    assert np.array_equal(np.concatenate([c.train, c.valid, c.test]), full)
    assert len(c.train) == 800 and len(c.valid) == 100


def test_corpus_save_load_round_trip(tmp_path):
    c = make_corpus("a b c a b d e " * 30, window_len=16)
    c.save(tmp_path)
    d = TokenizedCorpus.load(tmp_path, window_len=16)
    for s in ("train", "valid", "test"):
        assert np.array_equal(c.split(s), d.split(s))
    raw = (tmp_path / "tokens.bin").read_bytes()
    assert raw[:4] == b"TOKS"
    assert int.from_bytes(raw[4:8], "little") == c.vocab.size
    assert int.from_bytes(raw[8:16], "little") == len(c.train)


def test_token_stream_rejects_corruption(tmp_path):
    p = tmp_path / "t.bin"
    save_token_stream(p, 5, np.array([1, 2, 3]), np.array([4]), np.array([0]))
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_token_stream(p)
    p.write_bytes(raw[:-2])
    with pytest.raises(TruncatedFileError):
        load_token_stream(p)


def test_ids_out_of_vocab_rejected():
    v = build_vocab("a b", "word")
    with pytest.raises(VocabMismatchError):
        TokenizedCorpus(v, np.array([0, 7]), np.array([0]), np.array([0]))
