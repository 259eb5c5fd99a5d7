import pytest
from hypothesis import given, strategies as st

from mmasr.errors import ConfigError, FormatError, RangeError
from mmasr.vocab import BOS, EOS, PAD, SPECIALS, UNK, Vocab, build_vocab, normalize_text


def test_small_corpus():
    v = build_vocab(["a b a"])
    assert v.itos[4:] == ["a", "b"] and len(v) == 6


def test_frequency_then_lexicographic_ranking_and_truncation():
    v = build_vocab(["c b a", "c"], max_size=6)
    assert v.itos[4:] == ["c", "a"]
    v = build_vocab([" ".join(f"t{i}" for i in range(10)) + " t7"], max_size=5)
    assert v.itos[4:] == ["t7"]


def test_deterministic():
    corpus = ["x y z", "y z", "z"]
    assert build_vocab(corpus) == build_vocab(list(corpus))


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        build_vocab([])


def test_encode_decode_specials():
    v = build_vocab(["hello world"])
    assert v.encode("") == [EOS]
    assert v.encode("hello there") == [v.stoi["hello"], UNK, EOS]
    assert v.decode([BOS, v.stoi["world"], EOS, PAD]) == "world"
    with pytest.raises(RangeError):
        v.decode([len(v)])


def test_normalization():
    assert normalize_text("  Hello, WORLD!!  again ") == "hello world again"


def test_char_units_round_trip():
    v = build_vocab(["ab ba"], unit="char")
    assert v.decode(v.encode("ab ba")) == "ab ba"


WORDS = ["alpha", "beta", "gamma", "delta", "eps"]


@given(st.lists(st.sampled_from(WORDS), max_size=12))
def test_round_trip_property(words):
    v = build_vocab([" ".join(WORDS)])
    text = " ".join(words)
    assert v.decode(v.encode(text)) == text


def test_file_round_trip_and_bad_header(tmp_path):
    v = build_vocab(["q r s"])
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == v
    assert (tmp_path / "v.txt").read_text().split("\n")[:4] == list(SPECIALS)
    (tmp_path / "bad.txt").write_text("a\nb\n")
    with pytest.raises(FormatError):
        Vocab.load(tmp_path / "bad.txt")
