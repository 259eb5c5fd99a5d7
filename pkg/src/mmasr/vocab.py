"""Word- or character-level vocabularies with fixed special symbols."""

from __future__ import annotations

import re
import string
from collections import Counter
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError, RangeError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")
_SPACE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, drop ASCII punctuation, collapse whitespace."""
    return _SPACE.sub(" ", _PUNCT.sub("", text.lower())).strip()


def split_units(text: str, unit: str) -> list[str]:
    text = normalize_text(text)
    if unit == "word":
        return text.split()
    if unit == "char":
        # word boundaries survive as an explicit token
        return ["_" if ch == " " else ch for ch in text]
    raise ConfigError(f"unknown vocabulary unit {unit!r}")


def join_units(tokens: list[str], unit: str) -> str:
    if unit == "word":
        return " ".join(tokens)
    return "".join(" " if t == "_" else t for t in tokens).strip()


class Vocab:
    def __init__(self, tokens: Iterable[str], unit: str = "word"):
        if unit not in ("word", "char"):
            raise ConfigError(f"unknown vocabulary unit {unit!r}")
        self.unit = unit
        self.itos = list(SPECIALS)
        for tok in tokens:
            if tok in SPECIALS:
                raise ConfigError(f"content token collides with special symbol {tok!r}")
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    @property
    def size(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.unit == other.unit and self.itos == other.itos

    def encode(self, text: str) -> list[int]:
        """Token ids ending in eos; bos is never included."""
        ids = [self.stoi.get(t, UNK) for t in split_units(text, self.unit)]
        ids.append(EOS)
        return ids

    def decode(self, ids) -> str:
        toks = []
        for i in np.asarray(ids, dtype=np.int64).reshape(-1):
            i = int(i)
            if i < 0 or i >= len(self.itos):
                raise RangeError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            if i < len(SPECIALS):
                continue
            toks.append(self.itos[i])
        return join_units(toks, self.unit)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path, unit: str = "word") -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != SPECIALS:
            raise FormatError(f"{path}: first four lines must be {', '.join(SPECIALS)}")
        return cls(lines[4:], unit)


def build_vocab(corpus: Iterable[str], unit: str = "word", max_size: int | None = None) -> Vocab:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    counts = Counter()
    n = 0
    for text in corpus:
        counts.update(split_units(text, unit))
        n += 1
    if n == 0 or not counts:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        if max_size < len(SPECIALS):
            raise ConfigError(f"max_size must be at least {len(SPECIALS)}")
        ranked = ranked[:max_size - len(SPECIALS)]
    return Vocab([t for t, _ in ranked], unit)
