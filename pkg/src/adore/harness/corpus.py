"""Byte-level corpus ingestion and a deterministic synthetic text generator."""

from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np

from ..numkernel import make_rng


def encode(text: str | bytes) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64)


def decode(tokens) -> bytes:
    return bytes(int(t) for t in tokens)


def chunk_tokens(tokens: np.ndarray, context: int) -> list[np.ndarray]:
    return [tokens[i:i + context] for i in range(0, len(tokens), context)]


def ingest_corpus(path: str | Path, context: int) -> list[np.ndarray]:
    """Read a file as raw bytes and split it into ``context``-sized chunks in file order."""
    data = Path(path).read_bytes()
    return chunk_tokens(encode(data), context)


def iter_corpus(path: str | Path, context: int) -> Iterator[np.ndarray]:
    yield from ingest_corpus(path, context)


# ------------------------------------------------------------ synthetic corpus

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "kh"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "l", "s", "k"]

_NOUNS = ["lamp", "river", "letter", "garden", "door", "horse", "bridge", "coin", "map",
          "window", "boat", "bell", "key", "stone", "book", "candle", "basket", "road"]
_ADJS = ["old", "quiet", "small", "bright", "heavy", "strange", "warm", "broken",
         "green", "narrow", "golden", "distant"]
_PLACES = ["market", "harbor", "mill", "chapel", "forest", "tower", "square", "farm",
           "station", "library"]
_VERBS = ["carried", "found", "repaired", "hid", "painted", "sold", "opened", "watched"]

_TEMPLATES = [
    "{A} walked to the {place} with a {adj} {noun}.",
    "Later {A} told {B} about the {adj} {noun}.",
    "The {noun} was {adj} and the {noun2} was {adj2}.",
    "{B} said that the {noun} near the {place} was {adj}.",
    "When {A} saw the {noun}, {A} smiled.",
    "Nobody knew why {B} {verb} the {noun} in the {place}.",
    "{A} {verb} a {adj} {noun} before dinner.",
    "In the morning {B} and {A} {verb} the {noun2}.",
    "It was a {adj} day at the {place}.",
    "{B} counted {num} {noun}s by the {place}.",
]


def _name(rng: np.random.Generator) -> str:
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        parts.append(rng.choice(_ONSETS) + rng.choice(_VOWELS))
    parts.append(rng.choice(_CODAS))
    return "".join(parts).capitalize()


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def synthetic_text(n_bytes: int, seed: int = 0) -> str:
    """English-like prose with long-range references.

    Every paragraph introduces two invented names and a numeric code early on;
    later sentences reuse the names and the last sentence recalls the code, so
    predicting them well needs context beyond a short recent window.
    """
    rng = make_rng(seed)
    out: list[str] = []
    size = 0
    while size < n_bytes:
        a, b = _name(rng), _name(rng)
        code = str(int(rng.integers(1000, 10000)))
        sents = [f"{a} met {b} at the {_pick(rng, _PLACES)}. The code of {a} was {code}."]
        for _ in range(int(rng.integers(3, 7))):
            t = _pick(rng, _TEMPLATES)
            sents.append(t.format(
                A=a, B=b, place=_pick(rng, _PLACES), adj=_pick(rng, _ADJS),
                adj2=_pick(rng, _ADJS), noun=_pick(rng, _NOUNS), noun2=_pick(rng, _NOUNS),
                verb=_pick(rng, _VERBS), num=int(rng.integers(2, 20))))
        sents.append(f"At last {b} asked for the code and {a} said {code}.")
        para = " ".join(sents) + "\n\n"
        out.append(para)
        size += len(para)
    return "".join(out)[:n_bytes]


def write_synthetic_corpus(path: str | Path, n_bytes: int, seed: int = 0) -> Path:
    path = Path(path)
    path.write_text(synthetic_text(n_bytes, seed), encoding="utf-8")
    return path
