"""Char-level corpus loading, encoding, and batch sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

BUNDLED_CORPUS = os.path.join(os.path.dirname(__file__), "data", "corpus.txt")
VAL_FRACTION = 0.05  # tail split, disjoint from training


@dataclass
class Corpus:
    train_ids: np.ndarray  # int32
    val_ids: np.ndarray  # int32
    char_to_id: dict[str, int]

    @property
    def vocab_size(self) -> int:
        return len(self.char_to_id)


def load_corpus(path: str = "", vocab_size: int = 0) -> Corpus:
    """Read text, map chars to ids by codepoint order, split off the tail."""
    path = path or BUNDLED_CORPUS
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if len(text) < 1000:
        raise ConfigError(f"corpus at {path} too small ({len(text)} chars)")
    chars = sorted(set(text))
    if vocab_size and len(chars) > vocab_size:
        raise ConfigError(f"corpus has {len(chars)} chars > configured vocab {vocab_size}")
    char_to_id = {c: i for i, c in enumerate(chars)}
    ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8) if _is_ascii(chars) else None
    if ids is not None:
        lut = np.zeros(256, dtype=np.int32)
        for c, i in char_to_id.items():
            lut[ord(c)] = i
        ids = lut[ids]
    else:
        ids = np.array([char_to_id[c] for c in text], dtype=np.int32)
    split = int(len(ids) * (1.0 - VAL_FRACTION))
    return Corpus(train_ids=ids[:split].astype(np.int32),
                  val_ids=ids[split:].astype(np.int32),
                  char_to_id=char_to_id)


def _is_ascii(chars) -> bool:
    return all(ord(c) < 128 for c in chars)


def sample_batch(rng: np.random.Generator, ids: np.ndarray, batch_size: int,
                 context: int) -> tuple[np.ndarray, np.ndarray]:
    """Random contiguous windows: inputs (b, t) and next-char targets (b, t)."""
    starts = rng.integers(0, len(ids) - context - 1, size=batch_size)
    idx = starts[:, None] + np.arange(context + 1)
    windows = ids[idx]
    return windows[:, :-1], windows[:, 1:]


def eval_windows(ids: np.ndarray, context: int) -> np.ndarray:
    """All non-overlapping (context+1)-length windows of the split, stacked."""
    n = (len(ids) - 1) // context
    if n == 0:
        raise ConfigError("validation split shorter than one context window")
    idx = np.arange(n)[:, None] * context + np.arange(context + 1)
    return ids[idx]
