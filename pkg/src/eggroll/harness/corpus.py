"""Byte corpora: a deterministic synthetic text generator and a file loader.

Documents are separated by the byte 0x00.  The synthetic generator produces
pseudo-English (Zipf-distributed words over a fixed lexicon, sentences with
capitals and punctuation), which has enough structure for a byte-level model
to improve on uniform predictions without shipping a dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["synthetic_corpus", "load_corpus", "split_heldout", "DOC_SEP"]

DOC_SEP = 0
_ONSETS = ["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "th", "st", "ch", "br", "pl"]
_VOWELS = ["a", "e", "i", "o", "u", "ea", "ou", "ai"]
_CODAS = ["", "", "n", "s", "t", "r", "l", "nd", "st", "ng"]


def _lexicon(rng: np.random.Generator, size: int) -> list[str]:
    words: set[str] = set()
    out = []
    while len(out) < size:
        syll = 1 + min(rng.poisson(0.8), 3)
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(syll))
        if w not in words:
            words.add(w)
            out.append(w)
    # short words first so that frequent words are short
    out.sort(key=len)
    return out


def synthetic_corpus(n_bytes: int, seed: int = 0, lexicon_size: int = 2000) -> np.ndarray:
    """``n_bytes`` of pseudo-English as a uint8 array, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    lex = _lexicon(rng, lexicon_size)
    ranks = np.arange(1, lexicon_size + 1)
    zipf = 1.0 / ranks**1.1
    zipf /= zipf.sum()
    pieces: list[bytes] = []
    total = 0
    while total < n_bytes:
        doc = []
        for _ in range(rng.integers(3, 20)):
            words = [lex[i] for i in rng.choice(lexicon_size, size=rng.integers(4, 16), p=zipf)]
            words[0] = words[0].capitalize()
            for j in range(1, len(words) - 1):
                if rng.random() < 0.08:
                    words[j] += ","
            doc.append(" ".join(words) + rng.choice([".", ".", ".", "?", "!"]))
        text = (" ".join(doc)).encode("ascii") + b"\x00"
        pieces.append(text)
        total += len(text)
    return np.frombuffer(b"".join(pieces)[:n_bytes], dtype=np.uint8).copy()


def load_corpus(path) -> np.ndarray:
    """Raw bytes of a file, memory-mapped read-only."""
    path = Path(path)
    if path.stat().st_size == 0:
        raise ValueError(f"{path}: empty corpus")
    return np.memmap(path, dtype=np.uint8, mode="r")


def split_heldout(corpus: np.ndarray, heldout_bytes: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    """(train, held-out): the held-out slice is the last ``heldout_bytes``."""
    if heldout_bytes >= corpus.size:
        raise ValueError("held-out slice must be smaller than the corpus")
    return np.asarray(corpus[:-heldout_bytes]), np.asarray(corpus[-heldout_bytes:])
